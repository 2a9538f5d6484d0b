"""Task augmentations: relabeling, instance augmentation and support/query mixing.

Strategies compose in a fixed order, mix -> relabel -> instance, and are named
by the ablation row labels (``none``, ``relabel``, ``mix``, ``instance``,
``mix+relabel``, ``mix+instance``, ``relabel+mix+instance``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .episodes import Task, TaskBatch
from .seeding import derive_seed, rng_for

STRATEGY_ROWS = (
    "none",
    "relabel",
    "mix",
    "instance",
    "mix+relabel",
    "mix+instance",
    "relabel+mix+instance",
)
_PARTS = ("relabel", "instance", "mix")
DEFAULT_TRANSFORMS = ("hflip", "crop:2", "brightness:0.2")
_IMAGE_TRANSFORMS = {"hflip", "crop", "brightness"}
_VECTOR_TRANSFORMS = {"noise", "scale"}


class AugmentError(ValueError):
    pass


def parse_strategy(name: str) -> frozenset[str]:
    name = name.strip().lower()
    if name in ("", "none"):
        return frozenset()
    parts = [p.strip() for p in name.split("+")]
    bad = [p for p in parts if p not in _PARTS]
    if bad:
        raise AugmentError(f"unknown augmentation(s) {bad}; expected parts of {_PARTS}")
    return frozenset(parts)


def strategy_name(strategy: frozenset[str]) -> str:
    return "+".join(p for p in ("mix", "relabel", "instance") if p in strategy) or "none"


def parse_transform(text: str) -> tuple[str, float]:
    name, _, arg = text.strip().partition(":")
    known = _IMAGE_TRANSFORMS | _VECTOR_TRANSFORMS | {"identity"}
    if name not in known:
        raise AugmentError(f"unknown transform {name!r}")
    default = {"crop": 2.0, "brightness": 0.2, "noise": 0.05, "scale": 0.1}.get(name, 0.0)
    return name, float(arg) if arg else default


@dataclass(frozen=True)
class AugmentSpec:
    strategy: frozenset[str] = frozenset({"mix"})
    transforms: tuple[str, ...] = DEFAULT_TRANSFORMS
    mix_count: str | int = "max"
    augment_query: bool = False

    def __post_init__(self):
        if isinstance(self.strategy, str):
            object.__setattr__(self, "strategy", parse_strategy(self.strategy))
        for t in self.transforms:
            parse_transform(t)
        if not (self.mix_count == "max" or (isinstance(self.mix_count, int) and self.mix_count >= 0)):
            raise AugmentError(f"mix_count must be 'max' or a non-negative integer, got {self.mix_count!r}")

    @property
    def name(self) -> str:
        return strategy_name(self.strategy)

    def resolve_mix_count(self, task: Task) -> int:
        if self.mix_count == "max":
            return task.ways * min(task.shots, task.query_per_class)
        return int(self.mix_count)


@dataclass(frozen=True)
class AugmentedBatch:
    views: tuple[Task, ...]
    origin_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.views) % 2:
            raise AugmentError("augmented batch must hold an even number of views")
        if not self.origin_ids:
            object.__setattr__(self, "origin_ids", tuple(v.origin_id for v in self.views))

    def pairs(self):
        return [(self.views[2 * k], self.views[2 * k + 1]) for k in range(len(self.views) // 2)]


# ---------------------------------------------------------------------------


def relabel(task: Task, permutation: Sequence[int]) -> Task:
    """Apply the label map ``y -> permutation[y]`` to support and query."""
    perm = np.asarray(permutation, dtype=np.int64)
    if perm.shape != (task.ways,) or sorted(perm.tolist()) != list(range(task.ways)):
        raise AugmentError(f"{list(permutation)} is not a bijection on 0..{task.ways - 1}")
    return task.replace(support_y=perm[task.support_y], query_y=perm[task.query_y])


def random_relabel(task: Task, seed: int) -> Task:
    return relabel(task, rng_for(seed, "relabel").permutation(task.ways))


def _apply_transform(x: np.ndarray, name: str, arg: float, rng: np.random.Generator) -> np.ndarray:
    if name == "identity":
        return x
    image = x.ndim == 4
    if name in _IMAGE_TRANSFORMS and not image:
        raise AugmentError(f"transform {name!r} needs image samples, got shape {x.shape[1:]}")
    if name in _VECTOR_TRANSFORMS and image:
        raise AugmentError(f"transform {name!r} needs vector samples, got shape {x.shape[1:]}")
    if name == "hflip":
        return x[..., ::-1] if rng.random() < 0.5 else x
    if name == "crop":
        pad = int(arg)
        if pad == 0:
            return x
        h, w = x.shape[-2:]
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        return padded[..., dy : dy + h, dx : dx + w]
    if name == "brightness":
        return np.clip(x + rng.uniform(-arg, arg), 0.0, 1.0)
    if name == "noise":
        return x + rng.normal(0.0, arg, size=x.shape)
    # scale
    return x * (1.0 + rng.uniform(-arg, arg))


def draw_transform(spec: AugmentSpec, seed: int):
    """One draw ``t`` of the transform family; ``t`` is applied to whole sets."""
    parsed = [parse_transform(t) for t in spec.transforms]

    def t(x: np.ndarray) -> np.ndarray:
        rng = rng_for(seed, "instance")
        for name, arg in parsed:
            x = _apply_transform(x, name, arg, rng)
        return np.ascontiguousarray(x, dtype=np.float32)

    return t


def instance_augment(task: Task, spec: AugmentSpec, seed: int) -> Task:
    t = draw_transform(spec, seed)
    changes = {"support_x": t(task.support_x)}
    if spec.augment_query:
        changes["query_x"] = draw_transform(spec, derive_seed(seed, "query"))(task.query_x)
    return task.replace(**changes)


def _check_mix(task: Task, M: int) -> int:
    if M < 0 or M > min(len(task.support_y), len(task.query_y)):
        raise AugmentError(f"mix count {M} outside [0, min(|S|, |Q|)]")
    if M % task.ways:
        raise AugmentError(f"mix count {M} is not divisible by ways={task.ways}")
    m = M // task.ways
    if m > min(task.shots, task.query_per_class):
        raise AugmentError(f"{m} substitutions per class exceed availability")
    return m


def mix(task: Task, M: int, seed: int, exclude_query: np.ndarray | None = None) -> Task:
    """Swap ``M / ways`` support samples per class with same-class query samples.

    The substituted query samples move into the support and the displaced
    support samples take their query slots, so (N, K, q) and class balance are
    preserved and no sample appears in both sets. ``exclude_query`` lists query
    positions that must not be drawn (used to decorrelate paired views).
    """
    m = _check_mix(task, M)
    if m == 0:
        return task
    rng = rng_for(seed, "mix")
    sx, qx = task.support_x.copy(), task.query_x.copy()
    sid, qid = task.support_ids.copy(), task.query_ids.copy()
    excluded = set() if exclude_query is None else set(int(i) for i in exclude_query)
    for c in range(task.ways):
        s_pos = np.flatnonzero(task.support_y == c)
        q_pos = np.flatnonzero(task.query_y == c)
        q_free = np.array([p for p in q_pos if p not in excluded]) if excluded else q_pos
        if len(q_free) < m:
            q_free = q_pos
        s_sel = rng.choice(s_pos, size=m, replace=False)
        q_sel = rng.choice(q_free, size=m, replace=False)
        sx[s_sel], qx[q_sel] = task.query_x[q_sel], task.support_x[s_sel]
        sid[s_sel], qid[q_sel] = task.query_ids[q_sel], task.support_ids[s_sel]
    return task.replace(support_x=sx, query_x=qx, support_ids=sid, query_ids=qid)


def mixed_query_positions(original: Task, mixed: Task) -> np.ndarray:
    return np.flatnonzero(original.query_ids != mixed.query_ids)


def augment_pair(task: Task, spec: AugmentSpec, seed: int) -> tuple[Task, Task]:
    """Two views of ``task`` under the composed strategy (mix, relabel, instance)."""
    views = [task, task]
    if "mix" in spec.strategy:
        M = spec.resolve_mix_count(task)
        a = mix(task, M, derive_seed(seed, "view", 0))
        # second view avoids the first view's substituted query samples when possible
        b = mix(task, M, derive_seed(seed, "view", 1), exclude_query=mixed_query_positions(task, a))
        views = [a, b]
    if "relabel" in spec.strategy:
        views = [random_relabel(v, derive_seed(seed, "relabel", i)) for i, v in enumerate(views)]
    if "instance" in spec.strategy:
        views = [instance_augment(v, spec, derive_seed(seed, "instance", i)) for i, v in enumerate(views)]
    return views[0], views[1]


def make_contrastive_batch(batch: TaskBatch, spec: AugmentSpec, seed: int) -> AugmentedBatch:
    if len(batch.tasks) == 0:
        raise AugmentError("cannot augment an empty batch")
    views: list[Task] = []
    for k, task in enumerate(batch.tasks):
        views.extend(augment_pair(task, spec, derive_seed(seed, "pair", k)))
    return AugmentedBatch(tuple(views), tuple(v.origin_id for v in views))
