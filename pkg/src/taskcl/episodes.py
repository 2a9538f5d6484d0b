"""Episodic data model and multi-domain task generation.

A domain is a seeded generator of labelled samples (synthetic Gaussian
vectors, procedurally rendered 28x28 patterns, or an image folder). Episodes
pick ``ways`` classes, relabel them ``0..ways-1`` and draw disjoint support and
query samples per class.

The ground-truth domain of a task is hidden: while :func:`hidden_domains` is
active, reading :attr:`Task.domain_id` raises :class:`DomainLeakError`.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .seeding import derive_seed, rng_for

KINDS = {
    "synthetic-gaussian": "synthetic-gaussian",
    "gaussian": "synthetic-gaussian",
    "synthetic-image": "synthetic-image",
    "image": "synthetic-image",
    "image-folder": "image-folder",
    "folder": "image-folder",
}

IMAGE_SIZE = 28
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".pgm", ".tif", ".tiff"}


class EpisodeError(ValueError):
    """Invalid domain configuration or infeasible episode request."""


class DomainLeakError(RuntimeError):
    """Raised when a hidden domain label is read inside a training path."""


_guard = threading.local()


@contextlib.contextmanager
def hidden_domains() -> Iterator[None]:
    """Forbid reads of ``Task.domain_id`` for the duration of the block."""
    depth = getattr(_guard, "depth", 0)
    _guard.depth = depth + 1
    try:
        yield
    finally:
        _guard.depth = depth


def domains_hidden() -> bool:
    return getattr(_guard, "depth", 0) > 0


# ---------------------------------------------------------------------------
# Domains


@dataclass(frozen=True, eq=False)
class DomainSpec:
    domain_id: str
    kind: str
    class_count: int
    seed: int
    per_class: int
    sample_shape: tuple[int, ...]
    options: Mapping[str, object] = field(default_factory=dict)
    class_prototypes: np.ndarray | None = None
    class_names: tuple[str, ...] = ()
    files: tuple[tuple[Path, ...], ...] = ()
    _pools: dict = field(default_factory=dict, repr=False)

    def class_pool(self, c: int) -> np.ndarray:
        """All samples of class ``c`` as a float32 array ``(per_class, *shape)``."""
        if not 0 <= c < self.class_count:
            raise EpisodeError(f"class {c} out of range for domain {self.domain_id!r}")
        pool = self._pools.get(c)
        if pool is None:
            pool = _generate_pool(self, c)
            pool.setflags(write=False)
            self._pools[c] = pool
        return pool


@dataclass(frozen=True)
class MixtureSpec:
    domains: tuple[DomainSpec, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.domains:
            raise EpisodeError("mixture has no domains")
        if len(self.weights) != len(self.domains):
            raise EpisodeError("mixture weights and domains differ in length")
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise EpisodeError(f"mixture weights must be a probability vector, got {self.weights}")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise EpisodeError("duplicate domain ids in mixture")
        shapes = {d.sample_shape for d in self.domains}
        if len(shapes) != 1:
            raise EpisodeError(f"domains disagree on sample shape: {sorted(shapes)}")

    @classmethod
    def uniform(cls, domains: Sequence[DomainSpec]) -> "MixtureSpec":
        n = len(domains)
        return cls(tuple(domains), tuple([1.0 / n] * n) if n else ())

    @property
    def domain_ids(self) -> list[str]:
        return [d.domain_id for d in self.domains]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.domains[0].sample_shape


def parse_domain_text(text: str) -> dict[str, str]:
    """Parse ``"kind key=value key=value"`` into a mapping."""
    parts = text.split()
    if not parts:
        raise EpisodeError("empty domain specification")
    out = {"kind": parts[0]}
    for p in parts[1:]:
        if "=" not in p:
            raise EpisodeError(f"malformed domain option {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


_GAUSSIAN_KEYS = {"classes", "dim", "noise", "offset", "spread", "per_class"}
_IMAGE_KEYS = {"classes", "family", "noise", "jitter", "width", "count", "per_class", "contrast"}
_FOLDER_KEYS = {"root", "size"}
_FAMILIES = ("blobs", "gratings", "strokes")


def _floats(v) -> np.ndarray:
    if isinstance(v, str):
        v = [x for x in v.replace(",", " ").split() if x]
    return np.atleast_1d(np.asarray(v, dtype=np.float64))


def build_domain(spec: str | Mapping[str, object], seed: int, domain_id: str | None = None) -> DomainSpec:
    """Build a deterministic :class:`DomainSpec` from a configuration.

    ``spec`` is either a mapping with a ``kind`` key or the compact text form
    accepted by :func:`parse_domain_text`, e.g. ``"gaussian classes=4 dim=2"``.
    """
    opts = dict(parse_domain_text(spec) if isinstance(spec, str) else spec)
    raw_kind = str(opts.pop("kind", ""))
    kind = KINDS.get(raw_kind)
    if kind is None:
        raise EpisodeError(f"unknown domain kind {raw_kind!r}")
    name = domain_id or str(opts.pop("id", raw_kind))
    opts.pop("id", None)
    opts.pop("weight", None)
    seed = int(seed)

    if kind == "image-folder":
        return _build_folder(name, opts, seed)

    allowed = _GAUSSIAN_KEYS if kind == "synthetic-gaussian" else _IMAGE_KEYS
    unknown = set(opts) - allowed
    if unknown:
        raise EpisodeError(f"unknown options for {kind}: {sorted(unknown)}")
    classes = int(opts.get("classes", 20))
    if classes < 2:
        raise EpisodeError(f"class_count must be >= 2, got {classes}")
    per_class = int(opts.get("per_class", 40))
    if per_class < 2:
        raise EpisodeError("per_class must be >= 2")
    rng = rng_for(seed, "prototypes")

    if kind == "synthetic-gaussian":
        dim = int(opts.get("dim", 16))
        if dim < 1:
            raise EpisodeError("dim must be positive")
        offset = _floats(opts.get("offset", 0.0))
        if offset.size not in (1, dim):
            raise EpisodeError(f"offset must be a scalar or have {dim} entries")
        spread = float(opts.get("spread", 1.0))
        protos = offset + spread * rng.uniform(-1.0, 1.0, size=(classes, dim))
        options = {"noise": float(opts.get("noise", 0.1))}
        return DomainSpec(name, kind, classes, seed, per_class, (dim,), options, protos)

    family = str(opts.get("family", "blobs"))
    if family not in _FAMILIES:
        raise EpisodeError(f"unknown image family {family!r}; expected one of {_FAMILIES}")
    options = {
        "family": family,
        "noise": float(opts.get("noise", 0.1)),
        "jitter": float(opts.get("jitter", 1.0)),
        "width": float(opts.get("width", 2.0)),
        "count": int(opts.get("count", 3)),
        "contrast": float(opts.get("contrast", 1.0)),
    }
    protos = _image_prototypes(family, classes, options, rng)
    return DomainSpec(name, kind, classes, seed, per_class, (1, IMAGE_SIZE, IMAGE_SIZE), options, protos)


def _build_folder(name: str, opts: dict, seed: int) -> DomainSpec:
    unknown = set(opts) - _FOLDER_KEYS - {"classes", "per_class"}
    if unknown:
        raise EpisodeError(f"unknown options for image-folder: {sorted(unknown)}")
    if "root" not in opts:
        raise EpisodeError("image-folder domain requires root=")
    root = Path(str(opts["root"]))
    if not root.is_dir():
        raise EpisodeError(f"image-folder root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise EpisodeError(f"image-folder root {root} has fewer than 2 class directories")
    files = tuple(
        tuple(sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)) for d in class_dirs
    )
    counts = [len(f) for f in files]
    if min(counts) < 1:
        raise EpisodeError(f"empty class directory under {root}")
    size = int(opts.get("size", IMAGE_SIZE))
    return DomainSpec(
        domain_id=name,
        kind="image-folder",
        class_count=len(class_dirs),
        seed=seed,
        per_class=min(counts),
        sample_shape=(1, size, size),
        options={"size": size, "counts": tuple(counts)},
        class_names=tuple(d.name for d in class_dirs),
        files=files,
    )


# ---------------------------------------------------------------------------
# Sample generation

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)


def _image_prototypes(family: str, classes: int, options: dict, rng: np.random.Generator) -> np.ndarray:
    count = options["count"]
    if family == "blobs":
        # per blob: (y, x, amplitude)
        pos = rng.uniform(5.0, IMAGE_SIZE - 6.0, size=(classes, count, 2))
        amp = rng.uniform(0.6, 1.0, size=(classes, count, 1))
        return np.concatenate([pos, amp], axis=2).reshape(classes, -1)
    if family == "gratings":
        theta = rng.uniform(0.0, np.pi, size=(classes, 1))
        freq = rng.uniform(0.15, 0.45, size=(classes, 1))
        phase = rng.uniform(0.0, 2 * np.pi, size=(classes, 1))
        return np.concatenate([theta, freq, phase], axis=1)
    # strokes: endpoints (y0, x0, y1, x1) per stroke
    return rng.uniform(3.0, IMAGE_SIZE - 4.0, size=(classes, count * 4))


def _render(family: str, proto: np.ndarray, options: dict, rng: np.random.Generator) -> np.ndarray:
    jitter = options["jitter"]
    width = options["width"]
    shift = rng.normal(0.0, jitter, size=2)
    if family == "blobs":
        blobs = proto.reshape(-1, 3)
        img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
        for y, x, a in blobs:
            dy = _YY - (y + shift[0])
            dx = _XX - (x + shift[1])
            img += a * np.exp(-(dy * dy + dx * dx) / (2.0 * width * width))
    elif family == "gratings":
        theta, freq, phase = proto
        theta = theta + rng.normal(0.0, 0.05 * jitter)
        phase = phase + rng.normal(0.0, 0.5 * jitter)
        u = np.cos(theta) * _XX + np.sin(theta) * _YY
        img = 0.5 + 0.5 * np.sin(freq * u * (width / 2.0) + phase)
    else:
        segs = proto.reshape(-1, 4) + np.tile(shift, 2)
        img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
        for y0, x0, y1, x1 in segs:
            vy, vx = y1 - y0, x1 - x0
            L2 = vy * vy + vx * vx + 1e-12
            t = np.clip(((_YY - y0) * vy + (_XX - x0) * vx) / L2, 0.0, 1.0)
            d2 = (_YY - (y0 + t * vy)) ** 2 + (_XX - (x0 + t * vx)) ** 2
            img = np.maximum(img, np.exp(-d2 / (2.0 * (width / 2.0) ** 2)))
    img = options["contrast"] * img + rng.normal(0.0, options["noise"], size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _generate_pool(domain: DomainSpec, c: int) -> np.ndarray:
    if domain.kind == "image-folder":
        from PIL import Image

        size = int(domain.options["size"])
        out = []
        for f in domain.files[c][: domain.per_class]:
            with Image.open(f) as im:
                im = im.convert("L").resize((size, size), Image.BILINEAR)
                out.append(np.asarray(im, dtype=np.float32)[None] / 255.0)
        return np.stack(out).astype(np.float32)
    rng = rng_for(domain.seed, "pool", c)
    proto = domain.class_prototypes[c]
    if domain.kind == "synthetic-gaussian":
        noise = domain.options["noise"]
        samples = proto + noise * rng.standard_normal((domain.per_class, proto.size))
        return samples.astype(np.float32)
    family = domain.options["family"]
    imgs = [_render(family, proto, domain.options, rng) for _ in range(domain.per_class)]
    return np.stack(imgs)[:, None].astype(np.float32)


# ---------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True, eq=False)
class Task:
    """One few-shot episode. Samples are stored as arrays; labels in ``0..ways-1``."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_ids: np.ndarray
    query_ids: np.ndarray
    ways: int
    shots: int
    query_per_class: int
    origin_id: str
    _domain_id: str = field(repr=False)

    @property
    def domain_id(self) -> str:
        if domains_hidden():
            raise DomainLeakError(f"domain label of task {self.origin_id} read inside a hidden-domain block")
        return self._domain_id

    @property
    def support(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.support_x, self.support_y.tolist()))

    @property
    def query(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.query_x, self.query_y.tolist()))

    def replace(self, **changes) -> "Task":
        fields = {
            "support_x": self.support_x,
            "support_y": self.support_y,
            "query_x": self.query_x,
            "query_y": self.query_y,
            "support_ids": self.support_ids,
            "query_ids": self.query_ids,
            "ways": self.ways,
            "shots": self.shots,
            "query_per_class": self.query_per_class,
            "origin_id": self.origin_id,
            "_domain_id": self._domain_id,
        }
        fields.update(changes)
        return Task(**fields)

    def digest(self) -> str:
        """SHA-256 over every array and header field (byte-level identity)."""
        h = hashlib.sha256()
        h.update(f"{self.ways},{self.shots},{self.query_per_class},{self.origin_id},{self._domain_id}".encode())
        for a in (self.support_x, self.support_y, self.query_x, self.query_y, self.support_ids, self.query_ids):
            a = np.ascontiguousarray(a)
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class TaskBatch:
    tasks: tuple[Task, ...]
    batch_seed: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


def sample_episode(domain: DomainSpec, ways: int, shots: int, query_per_class: int, seed: int) -> Task:
    """Draw an N-way K-shot episode with ``query_per_class`` query samples per class."""
    if ways < 1 or shots < 1 or query_per_class < 1:
        raise EpisodeError(f"invalid episode shape ({ways}, {shots}, {query_per_class})")
    if domain.class_count < ways:
        raise EpisodeError(f"domain {domain.domain_id!r} has {domain.class_count} classes, {ways} requested")
    need = shots + query_per_class
    if domain.per_class < need:
        raise EpisodeError(f"domain {domain.domain_id!r} has {domain.per_class} samples per class, {need} needed")

    rng = rng_for(seed, "episode")
    classes = np.sort(rng.choice(domain.class_count, size=ways, replace=False))
    rng.shuffle(classes)  # label i <- classes[i]

    sx, sy, sid, qx, qy, qid = [], [], [], [], [], []
    for label, c in enumerate(classes):
        pool = domain.class_pool(int(c))
        idx = rng.choice(domain.per_class, size=need, replace=False)
        s_idx, q_idx = idx[:shots], idx[shots:]
        sx.append(pool[s_idx])
        qx.append(pool[q_idx])
        sy.append(np.full(shots, label, dtype=np.int64))
        qy.append(np.full(query_per_class, label, dtype=np.int64))
        sid.append(int(c) * domain.per_class + s_idx)
        qid.append(int(c) * domain.per_class + q_idx)

    return Task(
        support_x=np.concatenate(sx),
        support_y=np.concatenate(sy),
        query_x=np.concatenate(qx),
        query_y=np.concatenate(qy),
        support_ids=np.concatenate(sid).astype(np.int64),
        query_ids=np.concatenate(qid).astype(np.int64),
        ways=ways,
        shots=shots,
        query_per_class=query_per_class,
        origin_id=f"task-{int(seed) & 0xFFFFFFFFFFFFFFFF:016x}",
        _domain_id=domain.domain_id,
    )


def sample_from_mixture(mixture: MixtureSpec, shape: tuple[int, int, int], seed: int) -> Task:
    """Pick a domain by weight, then sample an episode; both draws depend on ``seed`` only."""
    rng = rng_for(seed, "domain")
    k = int(rng.choice(len(mixture.domains), p=np.asarray(mixture.weights)))
    ways, shots, q = shape
    return sample_episode(mixture.domains[k], ways, shots, q, derive_seed(seed, "task"))


def sample_task_batch(mixture: MixtureSpec, batch_size: int, episode_shape: tuple[int, int, int], seed: int) -> TaskBatch:
    if batch_size < 1:
        raise EpisodeError("batch_size must be positive")
    ways, shots, q = episode_shape
    if min(ways, shots, q) < 1:
        raise EpisodeError(f"invalid episode shape {episode_shape}")
    tasks = tuple(
        sample_from_mixture(mixture, episode_shape, derive_seed(seed, "batch-task", i)) for i in range(batch_size)
    )
    return TaskBatch(tasks, int(seed))


def sample_tasks(mixture: MixtureSpec, count: int, episode_shape: tuple[int, int, int], seed: int) -> list[Task]:
    """Independent evaluation tasks; same derivation as a batch of size ``count``."""
    return list(sample_task_batch(mixture, count, episode_shape, seed).tasks)
