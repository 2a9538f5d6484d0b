"""Experiment building blocks shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
import torch

from . import evalkit
from .encoding import aggregate_features, encode_support_set
from .episodes import MixtureSpec, Task, build_domain
from .metalearn import MetaModel, Method, TrainConfig, TrainedModel, embedding_mode_for, evaluate_tasks, meta_train
from .seeding import derive_seed
from .taskaug import AugmentSpec


def task_embedding(model: MetaModel, task: Task, mode: str, state=None) -> np.ndarray:
    """Routing / evaluation embedding of one task (no gradient step for pre modes)."""
    if mode == "set-encoder":
        return encode_support_set(task, model.encoder).vector
    adaptation = "post" if mode == "feature-agg-post" else "pre"
    return aggregate_features(task, model, adaptation, "mean", state).vector


def embed_tasks(trained: TrainedModel, tasks: Sequence[Task], mode: str | None = None) -> np.ndarray:
    mode = mode or embedding_mode_for(trained.method, trained.config)
    state = trained.config.adapt_state(trained.method)
    return np.stack([task_embedding(trained.model, t, mode, state) for t in tasks])


def embedding_quality(vectors: np.ndarray, domains: Sequence[str], split_seed: int = 0) -> tuple[float, float]:
    return evalkit.davies_bouldin(vectors, domains), evalkit.linear_probe(vectors, domains, split_seed)


def synthetic_image_mixture(seed: int = 0, **overrides) -> MixtureSpec:
    """Three procedurally rendered image domains sharing one pattern family.

    The domains differ only in blob width, so a single noisy 1-shot support
    set carries weak domain evidence.
    """
    opts = {"family": "blobs", "classes": 20, "noise": 0.5, "jitter": 3.0, "count": 3, "per_class": 30}
    opts.update(overrides)
    widths = opts.pop("widths", (2.0, 2.5, 3.0))
    domains = [build_domain({"kind": "synthetic-image", "width": w, **opts}, derive_seed(seed, "domain", i), f"img{i}") for i, w in enumerate(widths)]
    return MixtureSpec.uniform(domains)


def synthetic_vector_mixture(seed: int = 0, dim: int = 16, separation: float = 3.0, **overrides) -> MixtureSpec:
    """Three Gaussian domains whose class prototypes sit around distinct offsets."""
    opts = {"classes": 20, "noise": 0.3, "spread": 1.0, "per_class": 40}
    opts.update(overrides)
    domains = []
    for i in range(3):
        offset = np.zeros(dim)
        offset[i] = separation
        domains.append(build_domain({"kind": "synthetic-gaussian", "dim": dim, "offset": offset.tolist(), **opts}, derive_seed(seed, "domain", i), f"vec{i}"))
    return MixtureSpec.uniform(domains)


def ablation_row(
    config: TrainConfig,
    mixture: MixtureSpec,
    method: Method,
    strategy: str,
    eval_tasks: Sequence[Task],
    model_overrides=None,
    fewshot: bool = True,
) -> tuple[dict, TrainedModel, np.ndarray]:
    cfg = replace(config, augmentation=replace(config.augmentation, strategy=strategy))
    trained = meta_train(cfg, mixture, method, model_overrides=model_overrides)
    Z = embed_tasks(trained, eval_tasks)
    domains = [t.domain_id for t in eval_tasks]
    db, probe = embedding_quality(Z, domains, config.seed)
    row = {"strategy": AugmentSpec(strategy=strategy).name, "db": db, "probe": probe}
    if fewshot:
        row["fewshot"] = evaluate_tasks(trained.model, eval_tasks, cfg.adapt_state(method)).average[0]
    return row, trained, Z


def collapsed_cluster_init(bias: float = 4.0):
    """Init hook that pushes every task into cluster 0 before training."""

    def hook(model: MetaModel) -> None:
        last = model.cluster_head[-1]
        last.weight.mul_(0.1)
        last.bias.zero_()
        last.bias[0] = bias

    return hook


def max_cluster_share(trained: TrainedModel, tasks: Sequence[Task]) -> float:
    """Largest entry of the mean soft assignment over ``tasks``."""
    Z = torch.as_tensor(embed_tasks(trained, tasks), dtype=trained.model.dtype)
    with torch.no_grad():
        P = trained.model.assignment_probs(Z)
    return float(P.mean(dim=0).max())
