"""Task embeddings.

Two routes produce a vector ``z`` for a task:

* :class:`SetEncoder` -- a DeepSets encoder over the support samples
  (per-sample conv/MLP features, mean pooled over space and set, then a
  linear map);
* :func:`aggregate_features` -- a permutation-invariant reduction of the
  meta-learner's own backbone features, before or after inner adaptation.

Set pooling sorts each coordinate along the set axis before summing, so the
result is bitwise independent of support order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .episodes import Task

Reducer = Literal["mean", "max", "min"]
REDUCERS = ("mean", "max", "min")


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderParams:
    conv_blocks: tuple[tuple[int, int, str], ...] = ((32, 3, "relu"),) * 4
    hidden: tuple[int, ...] = (64, 64)
    output_dim: int = 64
    pool: str = "mean"
    label_conditioning: bool = False

    def __post_init__(self):
        if self.output_dim <= 0:
            raise EmbeddingError("output_dim must be positive")
        if self.pool != "mean":
            raise EmbeddingError("set pooling must be 'mean'")


@dataclass(frozen=True)
class ProjectionParams:
    layers: tuple[int, ...] = (64, 32)
    unit_normalize: bool = True
    init: str = "default"

    def __post_init__(self):
        if not self.layers or self.layers[-1] <= 0:
            raise EmbeddingError("projection output dimension must be positive")


@dataclass(frozen=True)
class TaskEmbedding:
    vector: np.ndarray
    source: str
    adaptation: str
    reducer: str
    origin_id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise EmbeddingError(f"non-finite embedding for task {self.origin_id}")


def set_reduce(h: torch.Tensor, reducer: str = "mean") -> torch.Tensor:
    """Order-independent reduction over dim 0."""
    if reducer == "mean":
        return torch.sort(h, dim=0).values.sum(dim=0) / h.shape[0]
    if reducer == "max":
        return h.max(dim=0).values
    if reducer == "min":
        return h.min(dim=0).values
    raise EmbeddingError(f"unknown reducer {reducer!r}; expected one of {REDUCERS}")


_ACT = {"relu": F.relu, "tanh": torch.tanh, "elu": F.elu}


class SetEncoder(nn.Module):
    """DeepSets task encoder ``z = rho(mean_i phi(x_i))``."""

    def __init__(self, params: EncoderParams, input_shape: tuple[int, ...], ways: int | None = None):
        super().__init__()
        self.params = params
        self.image = len(input_shape) == 3
        if params.label_conditioning and not ways:
            raise EmbeddingError("label conditioning needs the number of ways")
        self.ways = ways
        self.layers = nn.ModuleList()
        if self.image:
            c_in = input_shape[0]
            for c_out, k, act in params.conv_blocks:
                if act not in _ACT:
                    raise EmbeddingError(f"unknown activation {act!r}")
                self.layers.append(nn.Conv2d(c_in, c_out, k, padding=k // 2))
                c_in = c_out
            feat = c_in
        else:
            d_in = int(np.prod(input_shape))
            for h in params.hidden:
                self.layers.append(nn.Linear(d_in, h))
                d_in = h
            feat = d_in
        self.label_layer = None
        if params.label_conditioning:
            self.label_layer = nn.Linear(feat + ways, feat)
        self.rho = nn.Linear(feat, params.output_dim)

    def sample_features(self, x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        h = x
        if self.image:
            for layer, (_, _, act) in zip(self.layers, self.params.conv_blocks):
                h = F.max_pool2d(_ACT[act](layer(h)), 2)
            h = h.mean(dim=(2, 3))
        else:
            h = h.reshape(h.shape[0], -1)
            for layer in self.layers:
                h = F.relu(layer(h))
        if self.label_layer is not None:
            if y is None:
                raise EmbeddingError("label-conditioned encoder needs support labels")
            onehot = F.one_hot(y, self.ways).to(h.dtype)
            h = F.relu(self.label_layer(torch.cat([h, onehot], dim=1)))
        return h

    def forward(self, x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        return self.rho(set_reduce(self.sample_features(x, y), "mean"))


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, params: ProjectionParams):
        super().__init__()
        self.params = params
        self.layers = nn.ModuleList()
        d = in_dim
        for width in params.layers:
            self.layers.append(nn.Linear(d, width))
            d = width
        if params.init == "identity":
            for layer in self.layers:
                if layer.weight.shape[0] != layer.weight.shape[1]:
                    raise EmbeddingError("identity init needs square layers")
                with torch.no_grad():
                    layer.weight.copy_(torch.eye(layer.weight.shape[0]))
                    layer.bias.zero_()
        elif params.init != "default":
            raise EmbeddingError(f"unknown projection init {params.init!r}")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = z
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = F.relu(h)
        if self.params.unit_normalize:
            h = F.normalize(h, dim=-1, eps=1e-12)
        return h


def check_nondegenerate(Z: torch.Tensor, tol: float = 0.0) -> None:
    """Reject non-finite or zero rows before cosine similarity."""
    if not torch.all(torch.isfinite(Z)):
        raise EmbeddingError("embedding matrix has non-finite entries")
    norms = torch.linalg.vector_norm(Z.detach(), dim=-1)
    if torch.any(norms <= tol):
        bad = torch.nonzero(norms <= tol).flatten().tolist()
        raise EmbeddingError(f"zero-norm embedding rows {bad}; cosine similarity undefined")


def _tensor(a: np.ndarray, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)


def encode_support_set(task: Task, encoder: SetEncoder) -> TaskEmbedding:
    x = _tensor(task.support_x, encoder)
    if x.shape[1:] != _expected_shape(encoder, x):
        raise EmbeddingError(f"support shape {tuple(x.shape[1:])} incompatible with encoder")
    y = torch.as_tensor(task.support_y) if encoder.label_layer is not None else None
    with torch.no_grad():
        z = encoder(x, y)
    return TaskEmbedding(z.double().numpy(), "set-encoder", "pre", "mean", task.origin_id)


def _expected_shape(encoder: SetEncoder, x: torch.Tensor) -> tuple[int, ...]:
    first = encoder.layers[0]
    if encoder.image:
        if x.ndim != 4 or x.shape[1] != first.in_channels:
            return (first.in_channels, -1, -1)
        return tuple(x.shape[1:])
    return (first.in_features,) if x.ndim == 2 else (-1,)


def aggregate_features(task: Task, model, adaptation: str = "pre", reducer: str = "mean", state=None) -> TaskEmbedding:
    """Reduce backbone features of the support set into a task embedding.

    ``model`` is a :class:`taskcl.metalearn.MetaModel`. With ``adaptation="post"``
    the features come from parameters adapted on the support with ``state``.
    """
    from .metalearn import inner_adapt, task_film

    if reducer not in REDUCERS:
        raise EmbeddingError(f"unknown reducer {reducer!r}; expected one of {REDUCERS}")
    if adaptation not in ("pre", "post"):
        raise EmbeddingError(f"adaptation must be 'pre' or 'post', got {adaptation!r}")
    x = model.as_tensor(task.support_x)
    y = torch.as_tensor(task.support_y)
    film = task_film(model, x, y)
    params = None
    if adaptation == "post":
        if state is None:
            raise EmbeddingError("post-adaptation features need an AdaptState")
        params = inner_adapt(model, x, y, state, film=film)
    with torch.no_grad():
        h = model.features(x, params=params, film=film)
        z = set_reduce(h, reducer)
    return TaskEmbedding(z.double().numpy(), "feature-agg", adaptation, reducer, task.origin_id)


def project_embedding(z: TaskEmbedding | np.ndarray | torch.Tensor, head: ProjectionHead) -> np.ndarray:
    v = z.vector if isinstance(z, TaskEmbedding) else z
    t = torch.as_tensor(np.asarray(v), dtype=next(head.parameters()).dtype)
    if t.shape[-1] != head.layers[0].in_features:
        raise EmbeddingError(f"embedding dim {t.shape[-1]} != projection input {head.layers[0].in_features}")
    with torch.no_grad():
        return head(t).double().numpy()
