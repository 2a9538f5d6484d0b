"""Unsupervised domain-expert routing.

Tasks are grouped by k-means over task embeddings (single forward pass) or
over trial-adapted parameters (one inner adaptation per task). An
:class:`ExpertBank` keeps one parameter subset per cluster -- whole task
networks, classification heads only, or bias vectors only -- on top of a
shared base model.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans

from .episodes import Task
from .metalearn import AdaptState, MetaModel, inner_adapt, load_checkpoint, save_checkpoint, scope_names, task_film

log = logging.getLogger(__name__)

SCOPES = ("full", "head", "bias")


class RoutingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centers: np.ndarray
    space: str = "embedding"
    seed: int = 0
    inertia: float = 0.0

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise RoutingError("cluster centers must be a non-empty (k, d) array")
        if not np.all(np.isfinite(self.centers)):
            raise RoutingError("cluster centers must be finite")
        if self.space not in ("embedding", "parameter"):
            raise RoutingError(f"unknown routing space {self.space!r}")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def nearest_center(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the closest center (squared Euclidean); ties go to the lowest index."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def fit_task_clusters(points: Sequence[np.ndarray] | np.ndarray, k: int, seed: int, space: str = "embedding") -> ClusterModel:
    """k-means with k-means++ seeding and 10 restarts; the lowest inertia wins."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise RoutingError("points must share one dimension")
    if k < 1 or X.shape[0] < k:
        raise RoutingError(f"cannot fit {k} clusters to {X.shape[0]} points")
    km = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=int(seed) % (2**32)).fit(X)
    return ClusterModel(np.ascontiguousarray(km.cluster_centers_), space, int(seed), float(km.inertia_))


# ---------------------------------------------------------------------------
# Expert banks


@dataclass
class ExpertBank:
    base: MetaModel
    experts: list["OrderedDict[str, torch.Tensor]"]
    scope: str
    router: ClusterModel
    routed_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.experts) != self.router.k:
            raise RoutingError(f"{len(self.experts)} experts for {self.router.k} clusters")
        if self.scope != "full":
            n = sum(t.numel() for t in self.experts[0].values()) if self.experts else 0
            if n >= count_parameters(self.base):
                raise RoutingError("partial-scope experts must be strictly smaller than the base model")

    @property
    def M(self) -> int:
        return len(self.experts)

    def expert_params(self, j: int) -> "OrderedDict[str, torch.Tensor]":
        params = OrderedDict((n, p.detach()) for n, p in self.base.task_params().items())
        params.update(self.experts[j])
        return params


@dataclass
class FineTuneSpec:
    tasks: Sequence[Task] = ()
    steps: int = 100
    lr: float = 1e-3
    embed_fn: Callable[[Task], np.ndarray] | None = None
    mode: str = "embedding"
    adapt: AdaptState = field(default_factory=lambda: AdaptState(zero_head=False))


def flatten_params(params: "OrderedDict[str, torch.Tensor]", names: Sequence[str] | None = None) -> np.ndarray:
    names = list(params) if names is None else names
    return np.concatenate([params[n].detach().double().reshape(-1).numpy() for n in names])


def trial_adapted_vector(task: Task, model: MetaModel, state: AdaptState, params=None) -> np.ndarray:
    """Flattened parameters after one trial adaptation (task-network order)."""
    x, y = model.as_tensor(task.support_x), torch.as_tensor(task.support_y)
    with torch.no_grad():
        film = task_film(model, x, y)
    return flatten_params(inner_adapt(model, x, y, state, film=film, params=params))


def route_task(task: Task, bank: ExpertBank, mode: str = "embedding", embed_fn=None, state: AdaptState | None = None) -> int:
    if bank.M == 0:
        raise RoutingError("empty expert bank")
    if mode == "embedding":
        if bank.router.space != "embedding":
            raise RoutingError("embedding routing needs an embedding-space router")
        if embed_fn is None:
            raise RoutingError("embedding routing needs embed_fn")
        v = _vec(embed_fn(task))
    elif mode == "trial-adaptation":
        if bank.router.space != "parameter":
            raise RoutingError("trial-adaptation routing needs a parameter-space router")
        v = trial_adapted_vector(task, bank.base, state or AdaptState(zero_head=False))
    else:
        raise RoutingError(f"unknown routing mode {mode!r}")
    if v.shape[-1] != bank.router.dim:
        raise RoutingError(f"routing vector dim {v.shape[-1]} != center dim {bank.router.dim}")
    return int(nearest_center(v, bank.router.centers)[0])


def _vec(e) -> np.ndarray:
    return np.asarray(getattr(e, "vector", e), dtype=np.float64)


def _expert_init(base: MetaModel, scope: str) -> "OrderedDict[str, torch.Tensor]":
    names = scope_names(base, scope)
    params = base.task_params()
    return OrderedDict((n, params[n].detach().clone()) for n in names)


def _fine_tune(base: MetaModel, expert: "OrderedDict[str, torch.Tensor]", tasks: Sequence[Task], spec: FineTuneSpec):
    """First-order meta fine-tuning of the expert subset on its routed tasks."""
    leaves = OrderedDict((n, t.clone().requires_grad_()) for n, t in expert.items())
    opt = torch.optim.Adam(leaves.values(), lr=spec.lr)
    frozen = OrderedDict((n, p.detach()) for n, p in base.task_params().items())
    for step in range(spec.steps):
        task = tasks[step % len(tasks)]
        params = OrderedDict(frozen)
        params.update(leaves)
        sx, sy = base.as_tensor(task.support_x), torch.as_tensor(task.support_y)
        with torch.no_grad():
            film = task_film(base, sx, sy)
        adapted = inner_adapt(base, sx, sy, spec.adapt, film=film, params=params)
        loss = F.cross_entropy(base.logits(base.as_tensor(task.query_x), params=adapted, film=film), torch.as_tensor(task.query_y))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return OrderedDict((n, t.detach().clone()) for n, t in leaves.items())


def build_expert_bank(base: MetaModel, router: ClusterModel, scope: str, fine_tune_spec: FineTuneSpec | None = None) -> ExpertBank:
    """Initialise one expert per cluster from ``base`` and fine-tune on routed tasks."""
    if scope not in SCOPES and not scope.startswith("frozen:"):
        raise RoutingError(f"unknown expert scope {scope!r}")
    spec = fine_tune_spec or FineTuneSpec(steps=0)
    experts = [_expert_init(base, scope) for _ in range(router.k)]
    bank = ExpertBank(base, experts, scope, router, [0] * router.k)
    if spec.steps == 0 or not spec.tasks:
        return bank
    if spec.mode == "embedding":
        if spec.embed_fn is None:
            raise RoutingError("embedding-mode fine-tuning needs embed_fn")
        vecs = np.stack([_vec(spec.embed_fn(t)) for t in spec.tasks])
    else:
        vecs = np.stack([trial_adapted_vector(t, base, spec.adapt) for t in spec.tasks])
    routes = nearest_center(vecs, router.centers)
    for j in range(router.k):
        mine = [t for t, r in zip(spec.tasks, routes) if r == j]
        bank.routed_counts[j] = len(mine)
        if not mine:
            warnings.warn(f"expert {j} received no tasks; keeping the base initialisation", RuntimeWarning, stacklevel=2)
            continue
        bank.experts[j] = _fine_tune(base, experts[j], mine, spec)
    return bank


# ---------------------------------------------------------------------------
# Parameter accounting


@dataclass(frozen=True)
class ParameterAccount:
    base: int
    per_expert: int
    experts: int
    total_stored: int
    adapted_fraction: float

    def formula(self) -> str:
        sym = "N" if self.per_expert == self.base else "n"
        return f"N + M*{sym} = {self.base} + {self.experts}*{self.per_expert} = {self.total_stored}"


def count_parameters(model: MetaModel, names: Sequence[str] | None = None) -> int:
    params = model.task_params()
    names = list(params) if names is None else names
    return int(sum(int(np.prod(params[n].shape)) for n in names))


def scope_fraction(model: MetaModel, scope: str) -> tuple[int, int, float]:
    """(adapted, total, fraction) of task-network parameters under ``scope``."""
    adapted = count_parameters(model, scope_names(model, scope))
    total = count_parameters(model)
    return adapted, total, adapted / total


def account_parameters(bank: ExpertBank) -> ParameterAccount:
    N = count_parameters(bank.base)
    sizes = [int(sum(int(np.prod(t.shape)) for t in e.values())) for e in bank.experts]
    n = sizes[0] if sizes else 0
    if any(s != n for s in sizes):
        raise RoutingError("experts disagree in size")
    return ParameterAccount(N, n, bank.M, N + bank.M * n, n / N)


# ---------------------------------------------------------------------------
# Persistence: base checkpoint + per-expert delta arrays + centers CSV


def write_centers(path: Path, centers: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster"] + [f"c{i}" for i in range(centers.shape[1])])
        for j, row in enumerate(centers):
            w.writerow([j] + [repr(float(v)) for v in row])


def read_centers(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def save_bank(bank: ExpertBank, directory: Path) -> Path:
    directory = Path(directory)
    save_checkpoint(bank.base, directory / "base")
    write_centers(directory / "centers.csv", bank.router.centers)
    base = bank.base.task_params()
    experts = []
    for j, expert in enumerate(bank.experts):
        arrays = []
        for i, (name, t) in enumerate(expert.items()):
            delta = (t - base[name].detach()).numpy().astype("<f4")
            fname = f"expert_{j:02d}_{i:03d}.bin"
            (directory / fname).write_bytes(delta.tobytes())
            arrays.append({"name": name, "shape": list(delta.shape), "dtype": "float32", "file": fname})
        experts.append({"index": j, "routed_tasks": bank.routed_counts[j] if bank.routed_counts else 0, "arrays": arrays})
    manifest = {"format": "taskcl-bank/1", "scope": bank.scope, "space": bank.router.space, "seed": bank.router.seed, "experts": experts}
    (directory / "bank.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_bank(directory: Path) -> ExpertBank:
    directory = Path(directory)
    manifest = json.loads((directory / "bank.json").read_text())
    base = load_checkpoint(directory / "base")
    params = base.task_params()
    experts = []
    for e in manifest["experts"]:
        ex = OrderedDict()
        for a in e["arrays"]:
            delta = np.frombuffer((directory / a["file"]).read_bytes(), dtype="<f4").reshape(a["shape"])
            ex[a["name"]] = params[a["name"]].detach() + torch.as_tensor(delta.copy(), dtype=base.dtype)
        experts.append(ex)
    router = ClusterModel(read_centers(directory / "centers.csv"), manifest["space"], manifest["seed"])
    return ExpertBank(base, experts, manifest["scope"], router, [e["routed_tasks"] for e in manifest["experts"]])
