"""Clustering-quality metrics, probes, projections and numerical oracles."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment, minimize
from sklearn.model_selection import train_test_split


class MetricError(ValueError):
    pass


class DegenerateClusteringError(MetricError):
    pass


def davies_bouldin(embeddings, labels: Sequence) -> float:
    """Davies-Bouldin index with Euclidean scatter and centroid distances."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise MetricError("need one label per embedding row")
    groups = list(dict.fromkeys(labels.tolist()))
    if len(groups) < 2:
        raise MetricError("Davies-Bouldin needs at least two labels")
    centroids = np.stack([X[labels == g].mean(axis=0) for g in groups])
    scatter = np.array([np.linalg.norm(X[labels == g] - c, axis=1).mean() for g, c in zip(groups, centroids)])
    dist = np.linalg.norm(centroids[:, None] - centroids[None], axis=2)
    off = ~np.eye(len(groups), dtype=bool)
    if np.any(dist[off] == 0):
        raise DegenerateClusteringError("coincident centroids")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, dist, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


def _softmax_objective(W_flat, X, Y, l2):
    n, d = X.shape
    k = Y.shape[1]
    W = W_flat.reshape(d + 1, k)
    logits = X @ W[:-1] + W[-1]
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    loss = -(Y * logp).sum() / n + 0.5 * l2 * (W[:-1] ** 2).sum()
    G = np.exp(logp) - Y
    grad = np.vstack([X.T @ G / n + l2 * W[:-1], G.sum(axis=0, keepdims=True) / n])
    return loss, grad.ravel()


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    train_size: int
    test_size: int
    converged: bool


def linear_probe(embeddings, domain_labels: Sequence, split_seed: int = 0, l2: float = 1e-4, tol: float = 1e-6, detail: bool = False):
    """Test accuracy of a multinomial linear classifier on frozen embeddings.

    80/20 stratified split, features standardised on the training part,
    full-batch L-BFGS on the L2-regularised cross-entropy until the gradient
    norm drops below ``tol``.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(domain_labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise MetricError("linear probe needs at least two labels")
    if np.bincount(y).min() < 10:
        raise MetricError("linear probe needs at least 10 points per label")
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=0.2, stratify=y, random_state=int(split_seed) % (2**32))
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd[sd == 0] = 1.0
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    Y = np.eye(len(classes))[ytr]
    W0 = np.zeros((X.shape[1] + 1) * len(classes))
    res = minimize(_softmax_objective, W0, args=(Xtr, Y, l2), jac=True, method="L-BFGS-B", options={"gtol": tol, "maxiter": 5000})
    W = res.x.reshape(X.shape[1] + 1, len(classes))
    pred = np.argmax(Xte @ W[:-1] + W[-1], axis=1)
    acc = float((pred == yte).mean())
    if detail:
        return ProbeResult(acc, len(ytr), len(yte), bool(res.success))
    return acc


@dataclass
class HeatmapResult:
    matrix: np.ndarray
    clusters: list
    domains: list
    empty_rows: list = field(default_factory=list)


def cluster_domain_matrix(assignments: Sequence, domains: Sequence, clusters: Sequence | None = None) -> HeatmapResult:
    """Row-normalised cluster x domain frequency table.

    ``clusters`` fixes the row set (e.g. ``range(k)``); clusters without
    tasks become zero rows and are listed in ``empty_rows``.
    """
    a, d = list(assignments), list(domains)
    if len(a) != len(d):
        raise MetricError("assignments and domains differ in length")
    rows = sorted(set(a)) if clusters is None else list(clusters)
    cols = sorted(set(d))
    ri = {c: i for i, c in enumerate(rows)}
    ci = {c: i for i, c in enumerate(cols)}
    counts = np.zeros((len(rows), len(cols)))
    for c, dd in zip(a, d):
        if c not in ri:
            raise MetricError(f"assignment {c!r} not among clusters")
        counts[ri[c], ci[dd]] += 1
    totals = counts.sum(axis=1, keepdims=True)
    empty = [rows[i] for i in np.flatnonzero(totals[:, 0] == 0)]
    matrix = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return HeatmapResult(matrix, rows, cols, empty)


def matched_accuracy(assignments: Sequence, domains: Sequence) -> float:
    """Fraction of tasks whose cluster maps to their domain under the best one-to-one matching."""
    a_vals, a = np.unique(np.asarray(assignments), return_inverse=True)
    d_vals, d = np.unique(np.asarray(domains), return_inverse=True)
    counts = np.zeros((len(a_vals), len(d_vals)))
    np.add.at(counts, (a, d), 1)
    r, c = linear_sum_assignment(-counts)
    return float(counts[r, c].sum() / len(a))


def finite_difference_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    probe_count: int = 100,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences at random coordinates."""
    if step <= 0:
        raise MetricError("finite-difference step must be positive")
    x = params.detach().clone().requires_grad_()
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    flat = x.detach().reshape(-1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.numel(), size=probe_count, replace=probe_count > flat.numel())
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            plus = flat.clone()
            minus = flat.clone()
            plus[i] += step
            minus[i] -= step
            fp = float(loss_fn(plus.reshape(x.shape)))
            fm = float(loss_fn(minus.reshape(x.shape)))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise MetricError(f"non-finite loss at perturbed coordinate {int(i)}")
            numeric = (fp - fm) / (2 * step)
            analytic = float(grad.reshape(-1)[i])
            worst = max(worst, abs(analytic - numeric) / (abs(numeric) + 1e-12))
    return worst


def project_2d(embeddings) -> np.ndarray:
    """PCA to two components; each axis is signed so its largest-magnitude loading is positive."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise MetricError("projection needs at least 3 points")
    Xc = X - X.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    out = np.zeros((X.shape[0], 2))
    rank = int(np.sum(s > s.max() * 1e-12)) if s.size and s.max() > 0 else 0
    for k in range(min(2, rank)):
        v = Vt[k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, k] = Xc @ v
    return out


@dataclass
class MetricsReport:
    db_index: float | None = None
    probe_accuracy: float | None = None
    accuracy_by_domain: dict = field(default_factory=dict)
    average_accuracy: tuple | None = None
    heatmap: list | None = None
    heatmap_clusters: list | None = None
    heatmap_domains: list | None = None
    projection_2d: list | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.probe_accuracy is not None and not 0.0 <= self.probe_accuracy <= 1.0:
            raise MetricError("probe accuracy outside [0, 1]")
        if self.db_index is not None and self.db_index < 0:
            raise MetricError("negative Davies-Bouldin index")
        if self.heatmap is not None:
            sums = np.asarray(self.heatmap).sum(axis=1)
            if np.any((np.abs(sums - 1) > 1e-9) & (sums != 0)):
                raise MetricError("heatmap rows must sum to 1")

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Embedding dumps: origin_id, domain_id, z0..z{d-1}


def write_embeddings(path: Path, origin_ids: Sequence[str], vectors, domain_ids: Sequence[str] | None = None) -> None:
    V = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_id", "domain_id"] + [f"z{i}" for i in range(V.shape[1])])
        for k, (oid, row) in enumerate(zip(origin_ids, V)):
            dom = domain_ids[k] if domain_ids is not None else ""
            w.writerow([oid, dom] + [repr(float(v)) for v in row])


def read_embeddings(path: Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["origin_id", "domain_id"]:
        raise MetricError(f"{path} is not an embedding dump")
    body = rows[1:]
    return [r[0] for r in body], [r[1] for r in body], np.array([[float(v) for v in r[2:]] for r in body])
