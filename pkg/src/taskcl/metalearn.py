"""Gradient-based meta-learners and their contrastive variants.

A :class:`MetaModel` bundles the task network (backbone + linear head) with
the optional pieces different methods need: a set encoder and FiLM generator
(MMAML), a projection head for contrastive losses, a domain head (supervised
MMAML) and a cluster head (contrastive clustering router).

Inner adaptation is functional: parameters live in plain ``dict``s and the
module's own tensors are never modified by :func:`inner_adapt`.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import losses
from .encoding import EncoderParams, ProjectionHead, ProjectionParams, SetEncoder, set_reduce
from .episodes import MixtureSpec, Task, TaskBatch, hidden_domains, sample_task_batch, sample_tasks
from .seeding import derive_seed
from .taskaug import AugmentSpec, make_contrastive_batch

log = logging.getLogger(__name__)

ARCHS = ("maml", "anil", "mmaml")
VARIANTS = ("plain", "contrastive", "supervised", "clustering")
EMBEDDING_MODES = ("set-encoder", "feature-agg-pre", "feature-agg-post")


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


class DivergenceError(NumericalError):
    """Training loss stayed above the divergence threshold."""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, ...]
    ways: int
    channels: int = 32
    conv_blocks: int = 4
    hidden: int = 64
    mlp_layers: int = 2
    embed_dim: int = 64
    proj_dims: tuple[int, ...] = (64, 32)
    film: bool = False
    encoder: bool = False
    label_conditioning: bool = False
    domain_classes: int = 0
    cluster_count: int = 0
    norm: str = "layer"
    dtype: str = "float32"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["proj_dims"] = tuple(d["proj_dims"])
        return cls(**d)


class Backbone(nn.Module):
    """Conv4 (image) or MLP (vector) feature extractor with optional FiLM.

    Each block is linear map, parameter-free per-sample normalisation, FiLM,
    ReLU (and 2x2 max-pool for images). Without the normalisation the FiLM
    shifts can drift negative until every unit is dead.
    """

    def __init__(self, input_shape: tuple[int, ...], channels=32, blocks=4, hidden=64, layers=2, norm="layer"):
        super().__init__()
        if norm not in ("layer", "none"):
            raise ConfigError(f"unknown norm {norm!r}; expected 'layer' or 'none'")
        self.norm = norm
        self.image = len(input_shape) == 3
        self.blocks = nn.ModuleList()
        if self.image:
            c_in = input_shape[0]
            for _ in range(blocks):
                self.blocks.append(nn.Conv2d(c_in, channels, 3, padding=1))
                c_in = channels
            side = input_shape[1]
            for _ in range(blocks):
                side //= 2
            if side < 1:
                raise ConfigError(f"{blocks} pooling blocks do not fit a {input_shape[1]}px input")
            self.out_dim = channels * side * side
        else:
            d = int(np.prod(input_shape))
            for _ in range(layers):
                self.blocks.append(nn.Linear(d, hidden))
                d = hidden
            self.out_dim = hidden

    @property
    def block_channels(self) -> list[int]:
        return [b.out_channels if self.image else b.out_features for b in self.blocks]

    def forward(self, x, params: Mapping[str, torch.Tensor] | None = None, film=None, prefix="backbone."):
        h = x if self.image else x.reshape(x.shape[0], -1)
        for i, block in enumerate(self.blocks):
            w = params[f"{prefix}blocks.{i}.weight"] if params is not None else block.weight
            b = params[f"{prefix}blocks.{i}.bias"] if params is not None else block.bias
            h = F.conv2d(h, w, b, padding=1) if self.image else F.linear(h, w, b)
            if self.norm == "layer":
                h = F.group_norm(h, 1) if self.image else F.layer_norm(h, h.shape[-1:])
            if film is not None:
                g, s = film.gammas[i], film.betas[i]
                shape = (1, -1, 1, 1) if self.image else (1, -1)
                h = g.reshape(shape) * h + s.reshape(shape)
            h = F.relu(h)
            if self.image:
                h = F.max_pool2d(h, 2)
        return h.reshape(h.shape[0], -1)


@dataclass
class FiLMParams:
    """Channel-wise scales and shifts, one pair per backbone block."""

    gammas: list[torch.Tensor]
    betas: list[torch.Tensor]


class FilmGenerator(nn.Module):
    """Linear map from a task embedding to per-block FiLM parameters.

    Initialised to the identity modulation (gamma = 1, beta = 0).
    """

    def __init__(self, embed_dim: int, channels: Sequence[int]):
        super().__init__()
        self.channels = list(channels)
        self.linear = nn.Linear(embed_dim, 2 * sum(self.channels))
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.zero_()

    def forward(self, z: torch.Tensor) -> FiLMParams:
        out = self.linear(z)
        gammas, betas, start = [], [], 0
        for c in self.channels:
            gammas.append(1.0 + out[start : start + c])
            betas.append(out[start + c : start + 2 * c])
            start += 2 * c
        return FiLMParams(gammas, betas)


class MetaModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dtype = getattr(torch, config.dtype)
        self.backbone = Backbone(config.input_shape, config.channels, config.conv_blocks, config.hidden, config.mlp_layers, config.norm)
        self.head = nn.Linear(self.backbone.out_dim, config.ways)
        self.encoder = None
        self.film = None
        if config.encoder or config.film:
            enc = EncoderParams(
                conv_blocks=((config.channels, 3, "relu"),) * config.conv_blocks,
                hidden=(config.hidden,) * config.mlp_layers,
                output_dim=config.embed_dim,
                label_conditioning=config.label_conditioning,
            )
            self.encoder = SetEncoder(enc, config.input_shape, config.ways)
        if config.film:
            self.film = FilmGenerator(config.embed_dim, self.backbone.block_channels)
        emb_in = config.embed_dim if self.encoder is not None else self.backbone.out_dim
        self.projection = ProjectionHead(emb_in, ProjectionParams(layers=tuple(config.proj_dims)))
        self.domain_head = nn.Linear(emb_in, config.domain_classes) if config.domain_classes else None
        self.cluster_head = None
        if config.cluster_count:
            self.cluster_head = nn.Sequential(nn.Linear(emb_in, config.hidden), nn.ReLU(), nn.Linear(config.hidden, config.cluster_count))
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def as_tensor(self, a: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(a), dtype=self.dtype)

    def task_params(self) -> "OrderedDict[str, torch.Tensor]":
        """Backbone and head parameters, the part inner adaptation touches."""
        return OrderedDict((n, p) for n, p in self.named_parameters() if n.startswith(("backbone.", "head.")))

    def features(self, x, params=None, film=None) -> torch.Tensor:
        return self.backbone(x, params=params, film=film)

    def logits(self, x, params=None, film=None) -> torch.Tensor:
        h = self.features(x, params=params, film=film)
        if params is None:
            return self.head(h)
        return F.linear(h, params["head.weight"], params["head.bias"])

    def assignment_probs(self, z: torch.Tensor) -> torch.Tensor:
        if self.cluster_head is None:
            raise ConfigError("model has no cluster head")
        return F.softmax(self.cluster_head(z), dim=-1)


def build_model(config: ModelConfig, seed: int) -> MetaModel:
    torch.manual_seed(derive_seed(seed, "init") % (2**31))
    return MetaModel(config)


# ---------------------------------------------------------------------------
# Adaptation


def scope_names(model: MetaModel, scope: str) -> list[str]:
    """Task-network parameter names adapted under ``scope``.

    ``full`` -- backbone and head; ``head`` -- head only; ``bias`` -- every
    bias vector; ``frozen:F`` -- all but the first ``F`` backbone blocks.
    """
    names = list(model.task_params())
    if scope == "full":
        return names
    if scope == "head":
        return [n for n in names if n.startswith("head.")]
    if scope == "bias":
        return [n for n in names if n.endswith(".bias")]
    if scope.startswith("frozen:"):
        k = int(scope.split(":", 1)[1])
        if not 0 <= k <= len(model.backbone.blocks):
            raise ConfigError(f"cannot freeze {k} of {len(model.backbone.blocks)} blocks")
        frozen = {f"backbone.blocks.{i}." for i in range(k)}
        return [n for n in names if not any(n.startswith(f) for f in frozen)]
    raise ConfigError(f"unknown scope {scope!r}")


@dataclass(frozen=True)
class AdaptState:
    inner_lr: float = 0.4
    steps: int = 1
    scope: str = "full"
    first_order: bool = True
    zero_head: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("inner steps must be >= 0")
        if self.inner_lr < 0:
            raise ConfigError("inner_lr must be >= 0")


def adapt_params(
    params: Mapping[str, torch.Tensor],
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    trainable: Iterable[str],
    inner_lr: float,
    steps: int,
    first_order: bool = True,
) -> "OrderedDict[str, torch.Tensor]":
    """Plain gradient descent on ``loss_fn`` over the ``trainable`` entries."""
    current = OrderedDict(params)
    names = [n for n in trainable]
    for step in range(steps):
        loss = loss_fn(current)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite inner loss at step {step}: {loss.item()}")
        grads = torch.autograd.grad(loss, [current[n] for n in names], create_graph=not first_order, allow_unused=True)
        for n, g in zip(names, grads):
            if g is None:
                continue
            if not torch.all(torch.isfinite(g)):
                raise NumericalError(f"non-finite inner gradient for {n} at step {step}")
            current[n] = current[n] - inner_lr * g
    return current


def initial_task_params(model: MetaModel, state: AdaptState, params=None) -> "OrderedDict[str, torch.Tensor]":
    p = OrderedDict(params if params is not None else model.task_params())
    if state.zero_head:
        p["head.weight"] = torch.zeros_like(p["head.weight"]).requires_grad_()
        p["head.bias"] = torch.zeros_like(p["head.bias"]).requires_grad_()
    return p


def inner_adapt(model: MetaModel, support_x, support_y, state: AdaptState, film: FiLMParams | None = None, params=None):
    """Adapt the task network on a support set; returns a new parameter dict.

    In first-order mode the inner gradients are computed on detached copies
    and the resulting displacement is added to the (attached) start point.
    """
    if len(support_y) == 0:
        raise ConfigError("empty support set")
    x = support_x if torch.is_tensor(support_x) else model.as_tensor(support_x)
    y = support_y if torch.is_tensor(support_y) else torch.as_tensor(support_y)
    start = initial_task_params(model, state, params)
    if state.steps == 0 or state.inner_lr == 0:
        return start
    names = scope_names(model, state.scope)
    if not state.first_order:
        with torch.enable_grad():
            return adapt_params(
                start, lambda p: F.cross_entropy(model.logits(x, params=p, film=film), y), names, state.inner_lr, state.steps, False
            )
    inner_film = _detach_film(film)
    detached = OrderedDict((n, t.detach().requires_grad_(n in names)) for n, t in start.items())
    with torch.enable_grad():
        moved = adapt_params(
            detached, lambda p: F.cross_entropy(model.logits(x, params=p, film=inner_film), y), names, state.inner_lr, state.steps, True
        )
    out = OrderedDict(start)
    for n in names:
        out[n] = start[n] + (moved[n] - detached[n]).detach()
    return out


def _detach_film(film):
    if film is None:
        return None
    return FiLMParams([g.detach() for g in film.gammas], [b.detach() for b in film.betas])


def film_modulate(model: MetaModel, z: torch.Tensor | np.ndarray) -> FiLMParams:
    if model.film is None:
        raise ConfigError("model has no FiLM generator")
    z = z if torch.is_tensor(z) else model.as_tensor(getattr(z, "vector", z))
    if z.shape[-1] != model.film.linear.in_features:
        raise ConfigError(f"embedding dim {z.shape[-1]} != FiLM input {model.film.linear.in_features}")
    return model.film(z)


def encoder_input_labels(model: MetaModel, y: torch.Tensor):
    return y if model.config.label_conditioning else None


def task_embedding_tensor(model: MetaModel, x, y) -> torch.Tensor:
    if model.encoder is None:
        raise ConfigError("model has no set encoder")
    return model.encoder(x, encoder_input_labels(model, y))


def task_film(model: MetaModel, x, y) -> FiLMParams | None:
    if model.film is None:
        return None
    return model.film(task_embedding_tensor(model, x, y))


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class Method:
    arch: str = "maml"
    variant: str = "plain"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "clustering" and self.arch != "mmaml":
            raise ConfigError("the clustering router variant is defined for mmaml only")

    @classmethod
    def parse(cls, text: str) -> "Method":
        parts = text.strip().lower().split("-")
        if parts and parts[0] == "tsa":
            parts = parts[1:]
        if not parts:
            raise ConfigError(f"cannot parse method {text!r}")
        return cls(parts[0], parts[1] if len(parts) > 1 else "plain")

    @property
    def name(self) -> str:
        return f"{self.arch}-{self.variant}"

    @property
    def scope(self) -> str:
        return "head" if self.arch == "anil" else "full"


@dataclass(frozen=True)
class TrainConfig:
    ways: int = 5
    shots: int = 1
    query: int = 15
    lambda_con: float = 1.0
    outer_lr: float = 1e-3
    inner_lr: float = 0.4
    inner_steps: int = 1
    batch_size: int = 8
    episodes: int = 500
    seed: int = 0
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    embedding: str = "feature-agg-pre"
    temperature: float = 0.5
    cluster_temperature: float = 1.0
    entropy_weight: float = 1.0
    first_order: bool = True
    zero_head: bool = True
    divergence_threshold: float = 1e4
    divergence_patience: int = 5
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.outer_lr < 0 or self.inner_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lambda_con < 0:
            raise ConfigError("lambda_con must be non-negative")
        if self.episodes <= 0 or self.batch_size <= 0:
            raise ConfigError("episodes and batch_size must be positive")
        if self.embedding not in EMBEDDING_MODES:
            raise ConfigError(f"unknown embedding mode {self.embedding!r}; expected one of {EMBEDDING_MODES}")
        if min(self.ways, self.shots, self.query) < 1:
            raise ConfigError("episode shape must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.ways, self.shots, self.query)

    def adapt_state(self, method: Method) -> AdaptState:
        return AdaptState(self.inner_lr, self.inner_steps, method.scope, self.first_order, self.zero_head)

    def loss_config(self, clusters: int = 2) -> losses.LossConfig:
        return losses.LossConfig(self.temperature, self.lambda_con, max(clusters, 2), self.entropy_weight, self.cluster_temperature)


def model_config_for(method: Method, config: TrainConfig, input_shape, domain_count: int, clusters: int = 0, **overrides) -> ModelConfig:
    mm = method.arch == "mmaml"
    kw = dict(
        input_shape=tuple(input_shape),
        ways=config.ways,
        film=mm,
        encoder=mm,
        domain_classes=domain_count if (mm and method.variant == "supervised") else 0,
        cluster_count=(clusters or domain_count) if method.variant == "clustering" else 0,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass
class StepReport:
    step: int
    total: float
    episodic: float
    con: float
    clu: float
    entropy: float
    sup: float
    lam: float
    method: str
    seed: int

    def record(self) -> dict:
        return {
            "step": self.step,
            "episodic": self.episodic,
            "L_con": self.con,
            "L_clu": self.clu,
            "H": self.entropy,
            "L_sup": self.sup,
            "total": self.total,
            "lambda": self.lam,
            "method": self.method,
            "seed": self.seed,
        }


def episodic_loss(model: MetaModel, task: Task, state: AdaptState) -> torch.Tensor:
    """Query cross-entropy after adapting on the support set."""
    sx, sy = model.as_tensor(task.support_x), torch.as_tensor(task.support_y)
    film = task_film(model, sx, sy)
    params = inner_adapt(model, sx, sy, state, film=film)
    qx, qy = model.as_tensor(task.query_x), torch.as_tensor(task.query_y)
    return F.cross_entropy(model.logits(qx, params=params, film=film), qy)


def view_embeddings(model: MetaModel, views: Sequence[Task], mode: str, state: AdaptState) -> torch.Tensor:
    """Un-projected task embeddings of ``views`` under the configured mode."""
    rows = []
    for v in views:
        x, y = model.as_tensor(v.support_x), torch.as_tensor(v.support_y)
        if mode == "set-encoder":
            rows.append(task_embedding_tensor(model, x, y))
            continue
        film = task_film(model, x, y)
        params = inner_adapt(model, x, y, state, film=film) if mode == "feature-agg-post" else None
        rows.append(set_reduce(model.features(x, params=params, film=film), "mean"))
    return torch.stack(rows)


def embedding_mode_for(method: Method, config: TrainConfig) -> str:
    if method.arch == "mmaml":
        return "set-encoder"
    return "feature-agg-pre" if config.embedding == "set-encoder" else config.embedding


def compute_losses(model: MetaModel, batch: TaskBatch, config: TrainConfig, method: Method, seed: int, domain_index=None):
    """All loss terms of one meta step as tensors (``total`` is differentiable)."""
    state = config.adapt_state(method)
    episodic = sum((episodic_loss(model, t, state) for t in batch.tasks), torch.zeros((), dtype=model.dtype))
    zero = torch.zeros((), dtype=model.dtype)
    terms = {"episodic": episodic, "con": zero, "clu": zero, "entropy": zero, "sup": zero}
    aux = zero
    mode = embedding_mode_for(method, config)
    if method.variant in ("contrastive", "clustering"):
        aug = make_contrastive_batch(batch, config.augmentation, derive_seed(seed, "augment"))
        z = view_embeddings(model, aug.views, mode, state)
        Z = model.projection(z)
        if method.variant == "contrastive":
            aux = terms["con"] = losses.task_contrastive_loss(Z, config.temperature)
        else:
            cl = losses.contrastive_clustering_loss(Z, model.assignment_probs(z), config.loss_config(model.config.cluster_count))
            aux = cl.total
            terms.update(con=cl.task, clu=cl.cluster, entropy=cl.entropy)
    elif method.variant == "supervised":
        if domain_index is None:
            raise ConfigError("supervised variants need a domain index")
        labels = supervised_domain_labels(batch, domain_index)
        if method.arch == "mmaml":
            z = view_embeddings(model, batch.tasks, mode, state)
            aux = terms["sup"] = F.cross_entropy(model.domain_head(z), torch.as_tensor(labels))
        else:
            aug = make_contrastive_batch(batch, config.augmentation, derive_seed(seed, "augment"))
            Z = model.projection(view_embeddings(model, aug.views, mode, state))
            view_labels = [lab for lab in labels for _ in range(2)]
            aux = terms["sup"] = losses.supervised_task_contrastive_loss(Z, view_labels, config.temperature)
    terms["total"] = episodic + config.lambda_con * aux
    return terms


def supervised_domain_labels(batch: TaskBatch, domain_index: Mapping[str, int]) -> list[int]:
    """Domain supervision for the supervised baselines.

    This is the one sanctioned read of hidden labels inside training.
    """
    return [domain_index[t._domain_id] for t in batch.tasks]


def make_optimizer(model: MetaModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.outer_lr)


def meta_train_step(model, optimizer, batch: TaskBatch, config: TrainConfig, method: Method, step: int = 0, domain_index=None) -> StepReport:
    seed = derive_seed(config.seed, "step", step)
    optimizer.zero_grad(set_to_none=True)
    with hidden_domains():
        terms = compute_losses(model, batch, config, method, seed, domain_index)
    total = terms["total"]
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite total loss at step {step}")
    total.backward()
    optimizer.step()
    return StepReport(
        step=step,
        total=float(total.detach()),
        episodic=float(terms["episodic"].detach()),
        con=float(terms["con"].detach()),
        clu=float(terms["clu"].detach()),
        entropy=float(terms["entropy"].detach()),
        sup=float(terms["sup"].detach()),
        lam=config.lambda_con,
        method=method.name,
        seed=config.seed,
    )


@dataclass
class TrainedModel:
    model: MetaModel
    method: Method
    config: TrainConfig
    log: list[dict] = field(default_factory=list)


def meta_train(
    config: TrainConfig,
    mixture: MixtureSpec,
    method: Method,
    model_overrides: Mapping | None = None,
    clusters: int = 0,
    checkpoint_dir: Path | None = None,
    log_path: Path | None = None,
    progress: Callable[[StepReport], None] | None = None,
    init_hook: Callable[[MetaModel], None] | None = None,
) -> TrainedModel:
    """Run ``config.episodes`` meta steps; deterministic given ``config.seed``.

    ``init_hook`` may overwrite freshly initialised weights before the first
    step (used to start the cluster head from a collapsed state).
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    mcfg = model_config_for(method, config, mixture.sample_shape, len(mixture.domains), clusters, **dict(model_overrides or {}))
    model = build_model(mcfg, config.seed)
    if init_hook is not None:
        with torch.no_grad():
            init_hook(model)
    opt = make_optimizer(model, config)
    domain_index = {d: i for i, d in enumerate(mixture.domain_ids)}
    records: list[dict] = []
    over = 0
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(config.episodes):
            batch = sample_task_batch(mixture, config.batch_size, config.shape, derive_seed(config.seed, "batch", step))
            report = meta_train_step(model, opt, batch, config, method, step, domain_index)
            rec = report.record()
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress:
                progress(report)
            over = over + 1 if report.total > config.divergence_threshold else 0
            if over >= config.divergence_patience:
                raise DivergenceError(
                    f"loss above {config.divergence_threshold} for {over} consecutive steps (step {step}, loss {report.total:.4g})"
                )
            if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"step_{step + 1:06d}")
    finally:
        if fh:
            fh.close()
    trained = TrainedModel(model, method, config, records)
    if checkpoint_dir:
        save_checkpoint(model, Path(checkpoint_dir) / "final")
    return trained


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class AccuracyReport:
    per_domain: dict[str, tuple[float, float]]
    average: tuple[float, float]
    episode_accuracies: list[float]
    episode_domains: list[str]

    def to_json(self) -> dict:
        return {
            "average": {"mean": self.average[0], "ci95": self.average[1]},
            "per_domain": {k: {"mean": m, "ci95": c} for k, (m, c) in self.per_domain.items()},
            "episodes": len(self.episode_accuracies),
        }


def confidence_interval(acc: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * stdev / sqrt(E)`` (sample stdev)."""
    a = np.asarray(acc, dtype=np.float64)
    if a.size < 2:
        return float(a.mean()) if a.size else float("nan"), float("nan")
    return float(a.mean()), float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


def task_accuracy(model: MetaModel, task: Task, state: AdaptState, params=None) -> float:
    sx, sy = model.as_tensor(task.support_x), torch.as_tensor(task.support_y)
    with torch.no_grad():
        film = task_film(model, sx, sy)
    adapted = inner_adapt(model, sx, sy, state, film=film, params=params)
    with torch.no_grad():
        pred = model.logits(model.as_tensor(task.query_x), params=adapted, film=film).argmax(dim=1)
    return float((pred.numpy() == task.query_y).mean())


def evaluate_tasks(model: MetaModel, tasks: Sequence[Task], state: AdaptState, predict=None) -> AccuracyReport:
    accs, doms = [], []
    for t in tasks:
        accs.append(predict(t) if predict else task_accuracy(model, t, state))
        doms.append(t.domain_id)
    per = {}
    for d in sorted(set(doms)):
        per[d] = confidence_interval([a for a, dd in zip(accs, doms) if dd == d])
    return AccuracyReport(per, confidence_interval(accs), accs, doms)


def evaluate_few_shot(trained: TrainedModel | MetaModel, mixture: MixtureSpec, episodes: int, seed: int, state: AdaptState | None = None, shape=None) -> AccuracyReport:
    if episodes < 2:
        raise ConfigError("evaluation needs at least 2 episodes")
    if isinstance(trained, TrainedModel):
        model = trained.model
        state = state or trained.config.adapt_state(trained.method)
        shape = shape or trained.config.shape
    else:
        model = trained
        if state is None or shape is None:
            raise ConfigError("state and shape are required for a bare model")
    tasks = sample_tasks(mixture, episodes, shape, derive_seed(seed, "eval"))
    return evaluate_tasks(model, tasks, state)


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one little-endian float32 file per array


def save_checkpoint(model: MetaModel, directory: Path, extra: Mapping | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = []
    for i, (name, tensor) in enumerate(model.state_dict().items()):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        fname = f"array_{i:03d}.bin"
        (directory / fname).write_bytes(arr.tobytes())
        arrays.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "file": fname})
    manifest = {"format": "taskcl-checkpoint/1", "model_config": model.config.to_json(), "arrays": arrays}
    if extra:
        manifest["extra"] = dict(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: Path) -> MetaModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = MetaModel(ModelConfig.from_json(manifest["model_config"]))
    state = {}
    for entry in manifest["arrays"]:
        raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.as_tensor(raw.copy(), dtype=model.dtype)
    model.load_state_dict(state)
    return model


def read_manifest(directory: Path) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
