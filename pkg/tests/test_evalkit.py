import json

import numpy as np
import pytest
import torch
from scipy.stats import special_ortho_group

from taskcl import evalkit
from taskcl.evalkit import (
    DegenerateClusteringError,
    MetricError,
    MetricsReport,
    cluster_domain_matrix,
    davies_bouldin,
    finite_difference_check,
    linear_probe,
    matched_accuracy,
    project_2d,
)

import oracles


def test_db_zero_scatter():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert davies_bouldin(X, [0, 0, 1, 1]) == 0.0


def test_db_errors():
    with pytest.raises(MetricError):
        davies_bouldin(np.zeros((4, 2)), [0, 0, 0, 0])
    with pytest.raises(DegenerateClusteringError):
        davies_bouldin(np.array([[1.0], [-1.0], [2.0], [-2.0]]), [0, 0, 1, 1])


def test_db_matches_brute_force():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 4))
    y = rng.integers(0, 3, size=30)
    assert abs(davies_bouldin(X, y) - oracles.davies_bouldin(X.tolist(), y.tolist())) < 1e-10


def test_db_rigid_motion_invariance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 5))
    y = np.repeat([0, 1, 2, 3], 10)
    R = special_ortho_group.rvs(5, random_state=2)
    assert abs(davies_bouldin(X @ R.T + 7.5, y) - davies_bouldin(X, y)) < 1e-8


# ---------------------------------------------------------------------------
# probe


def test_probe_separable():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(size=(30, 3)) - 5, rng.normal(size=(30, 3)) + 5])
    assert linear_probe(X, [0] * 30 + [1] * 30) == 1.0


def test_probe_chance_on_shuffled_labels():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 8))
    accs = [linear_probe(X, rng.permutation(np.repeat([0, 1, 2], 100)), split_seed=s) for s in range(5)]
    assert abs(np.mean(accs) - 1 / 3) <= 0.1


def test_probe_deterministic_and_detail():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(60, 4)), np.repeat(["a", "b", "c"], 20)
    assert linear_probe(X, y, 7) == linear_probe(X, y, 7)
    res = linear_probe(X, y, 7, detail=True)
    assert (res.train_size, res.test_size) == (48, 12) and res.converged


def test_probe_errors():
    with pytest.raises(MetricError):
        linear_probe(np.zeros((30, 2)), [0] * 30)
    with pytest.raises(MetricError):
        linear_probe(np.zeros((15, 2)), [0] * 9 + [1] * 6)


# ---------------------------------------------------------------------------
# heatmaps


def test_perfect_routing_is_permutation():
    doms = ["a", "b", "c"] * 10
    assign = [{"a": 2, "b": 0, "c": 1}[d] for d in doms]
    hm = cluster_domain_matrix(assign, doms)
    assert np.array_equal(hm.matrix, np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float))
    assert matched_accuracy(assign, doms) == 1.0


def test_rows_sum_to_one_and_empty_rows():
    rng = np.random.default_rng(0)
    hm = cluster_domain_matrix(rng.integers(0, 3, 50).tolist(), rng.choice(["x", "y"], 50).tolist(), clusters=range(5))
    sums = hm.matrix.sum(axis=1)
    assert np.all(np.abs(sums[:3] - 1) <= 1e-9)
    assert hm.empty_rows == [3, 4] and np.all(hm.matrix[3:] == 0)


def test_uniform_random_assignment_monte_carlo():
    rng = np.random.default_rng(5)
    hm = cluster_domain_matrix(rng.integers(0, 3, 3000).tolist(), rng.integers(0, 3, 3000).tolist())
    assert np.all(np.abs(hm.matrix - 1 / 3) <= 0.05)


def test_heatmap_length_mismatch():
    with pytest.raises(MetricError):
        cluster_domain_matrix([0, 1], ["a"])


# ---------------------------------------------------------------------------
# finite differences


def test_fd_quadratic():
    x = torch.as_tensor(np.random.default_rng(0).normal(size=20))
    assert finite_difference_check(lambda v: (v**2).sum(), x, probe_count=20) < 1e-8


def test_fd_step_monotonicity_on_cubic():
    x = torch.as_tensor(np.random.default_rng(1).uniform(0.5, 2.0, size=10))
    big = finite_difference_check(lambda v: (v**3).sum(), x, probe_count=10, step=1e-1, seed=0)
    small = finite_difference_check(lambda v: (v**3).sum(), x, probe_count=10, step=1e-4, seed=0)
    assert big > small


def test_fd_rejects_non_finite_and_bad_step():
    x = torch.zeros(3, dtype=torch.float64)
    with pytest.raises(MetricError):
        finite_difference_check(lambda v: (v**2).sum(), x, step=0.0)
    with pytest.raises(MetricError):
        finite_difference_check(lambda v: torch.log(v).sum(), x, probe_count=3, step=1e-4)


# ---------------------------------------------------------------------------
# projection


def test_planar_points_preserve_distances():
    rng = np.random.default_rng(0)
    P2 = rng.normal(size=(12, 2)) * [3.0, 1.0]
    Q, _ = np.linalg.qr(rng.normal(size=(7, 2)))
    X = P2 @ Q.T + rng.normal(size=7)
    C = project_2d(X)
    d_in = np.linalg.norm(X[:, None] - X[None], axis=2)
    d_out = np.linalg.norm(C[:, None] - C[None], axis=2)
    assert np.max(np.abs(d_in - d_out)) < 1e-8


def test_projection_duplicates_and_ordering():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(10, 5))
    X = np.concatenate([X, X[:3]])
    C = project_2d(X)
    assert np.array_equal(C[:3], C[10:])
    assert C[:, 0].var() >= C[:, 1].var()


def test_projection_rank_deficient_and_errors():
    X = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
    C = project_2d(X)
    assert np.all(C[:, 1] == 0)
    with pytest.raises(MetricError):
        project_2d(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# report and dumps


def test_metrics_report_validation(tmp_path):
    rep = MetricsReport(db_index=0.4, probe_accuracy=0.9, heatmap=[[1.0, 0.0], [0.0, 0.0]])
    rep.write(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["db_index"] == 0.4
    with pytest.raises(MetricError):
        MetricsReport(probe_accuracy=1.2)
    with pytest.raises(MetricError):
        MetricsReport(db_index=-1.0)
    with pytest.raises(MetricError):
        MetricsReport(heatmap=[[0.5, 0.4]])


def test_embedding_dump_round_trip(tmp_path):
    V = np.random.default_rng(0).normal(size=(4, 3))
    evalkit.write_embeddings(tmp_path / "e.csv", ["a", "b", "c", "d"], V, ["x", "y", "x", "y"])
    ids, doms, back = evalkit.read_embeddings(tmp_path / "e.csv")
    assert ids == ["a", "b", "c", "d"] and doms == ["x", "y", "x", "y"]
    assert np.array_equal(back, V)
    evalkit.write_embeddings(tmp_path / "n.csv", ["a"], V[:1])
    assert evalkit.read_embeddings(tmp_path / "n.csv")[1] == [""]
