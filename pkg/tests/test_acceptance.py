"""Acceptance suite: one PASS/FAIL line per criterion.

The seeded training reproductions (criteria 4 and 8) are marked slow; together
they take roughly half an hour of CPU.
"""

import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

import oracles
from taskcl import losses, metalearn, routing
from taskcl.episodes import build_domain, sample_episode, sample_tasks
from taskcl.evalkit import finite_difference_check, matched_accuracy
from taskcl.experiments import (
    ablation_row,
    collapsed_cluster_init,
    embed_tasks,
    max_cluster_share,
    synthetic_image_mixture,
    synthetic_vector_mixture,
    task_embedding,
)
from taskcl.metalearn import (
    Method,
    ModelConfig,
    TrainConfig,
    build_model,
    evaluate_few_shot,
    evaluate_tasks,
    load_checkpoint,
    meta_train,
    save_checkpoint,
)
from taskcl.routing import (
    ClusterModel,
    account_parameters,
    build_expert_bank,
    count_parameters,
    fit_task_clusters,
    route_task,
    scope_fraction,
)
from taskcl.taskaug import STRATEGY_ROWS, AugmentSpec, augment_pair, mix, relabel


# ---------------------------------------------------------------------------
# 1. loss gradients


def test_criterion_1_loss_gradients(criterion):
    t0 = time.time()
    torch.manual_seed(0)
    W = torch.randn(8, 4, dtype=torch.float64)
    labels = [0, 0, 1, 1, 2, 2, 0, 1] * 2
    fns = {
        "nt_xent": lambda Z: losses.nt_xent(0, 1, Z, 0.5),
        "task_contrastive": lambda Z: losses.task_contrastive_loss(Z, 0.5),
        "clustering": lambda Z: losses.contrastive_clustering_loss(Z, torch.softmax(Z @ W, dim=1), losses.LossConfig(cluster_count=4)).total,
        "supervised": lambda Z: losses.supervised_task_contrastive_loss(Z, labels, 0.5),
    }
    worst = {}
    for k, (name, fn) in enumerate(fns.items()):
        Z = torch.as_tensor(np.random.default_rng(k).normal(size=(16, 8)))
        worst[name] = finite_difference_check(fn, Z, probe_count=100, step=1e-4, seed=k)
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{n} {e:.2e}" for n, e in worst.items())
    criterion(1, ok, f"max relative FD error ({detail}) < 1e-4 in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. oracle equivalence


def test_criterion_2_oracle_equivalence(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(30):
        n = int(rng.choice([8, 10, 12, 14, 16]))
        Z = rng.normal(size=(n, int(rng.integers(2, 9))))
        tau = float(rng.uniform(0.1, 2.0))
        got = losses.task_contrastive_loss(torch.as_tensor(Z), tau).item()
        worst = max(worst, abs(got - oracles.task_contrastive(Z.tolist(), tau)))
    E = torch.eye(4, dtype=torch.float64)
    four = losses.task_contrastive_loss(E[[0, 0, 1, 1]], 1.0).item()
    target = -math.log(math.e / (math.e + 2))
    ok = worst < 1e-10 and abs(four - target) < 1e-12 and abs(four - 0.5514) < 5e-5
    criterion(2, ok, f"double-loop max diff {worst:.1e} < 1e-10; orthogonal pairs {four:.6f} vs -ln(e/(e+2)) {target:.6f}")


# ---------------------------------------------------------------------------
# 3. augmentation invariants


def test_criterion_3_augmentation_invariants(criterion):
    dom = build_domain({"kind": "synthetic-image", "classes": 10, "per_class": 12}, 0, "img")
    ways, shots, q = 5, 2, 3
    violations = Counter()
    for strategy in STRATEGY_ROWS:
        spec = AugmentSpec(strategy=strategy, mix_count=ways)
        for s in range(1000):
            t = sample_episode(dom, ways, shots, q, s)
            for v in augment_pair(t, spec, s):
                violations["shape"] += (v.ways, v.shots, v.query_per_class) != (ways, shots, q)
                violations["shape"] += v.support_x.shape != t.support_x.shape or v.query_x.shape != t.query_x.shape
                violations["balance"] += Counter(v.support_y.tolist()) != Counter(t.support_y.tolist())
                violations["balance"] += Counter(v.query_y.tolist()) != Counter(t.query_y.tolist())
                if "mix" in spec.strategy and "relabel" not in spec.strategy:
                    for c in range(ways):
                        moved = set(v.support_ids[v.support_y == c].tolist()) - set(t.support_ids[t.support_y == c].tolist())
                        violations["mix count"] += len(moved) != 1
            perm = np.random.default_rng(s).permutation(ways)
            violations["relabel round trip"] += relabel(relabel(t, perm), np.argsort(perm)).digest() != t.digest()
            violations["mix M=0"] += mix(t, 0, s).digest() != t.digest()
    total = sum(violations.values())
    criterion(3, total == 0, f"7 strategies x 1000 tasks, violations {dict(violations) or 0}")


# ---------------------------------------------------------------------------
# 4. augmentation ablation ordering


@pytest.mark.slow
def test_criterion_4_augmentation_ordering(criterion):
    t0 = time.time()
    mixture = synthetic_image_mixture(0)
    tasks = sample_tasks(mixture, 600, (5, 1, 5), 12345)
    cfg = TrainConfig(episodes=600, batch_size=8, query=5, lambda_con=1.0, outer_lr=1e-3)
    rows = {}
    for strategy in ("none", "instance", "mix"):
        rows[strategy], _, _ = ablation_row(cfg, mixture, Method.parse("mmaml-contrastive"), strategy, tasks, fewshot=False)
    elapsed = time.time() - t0
    db = {k: r["db"] for k, r in rows.items()}
    probe = {k: r["probe"] for k, r in rows.items()}
    db_ok = db["mix"] < db["instance"] < db["none"]
    probe_ok = probe["mix"] > probe["instance"] > probe["none"]
    ok = db_ok and probe_ok and probe["mix"] >= 0.95 and elapsed <= 900
    criterion(
        4,
        ok,
        "DB mix/instance/none {:.3f}/{:.3f}/{:.3f} (ordered: {}); probe {:.3f}/{:.3f}/{:.3f} (ordered: {}); {:.0f}s".format(
            db["mix"], db["instance"], db["none"], db_ok, probe["mix"], probe["instance"], probe["none"], probe_ok, elapsed
        ),
    )


# ---------------------------------------------------------------------------
# 5. routing


def test_criterion_5_routing(criterion, monkeypatch):
    mixture = synthetic_vector_mixture(0)
    cfg = TrainConfig(episodes=100, batch_size=8, query=5)
    trained = meta_train(cfg, mixture, Method.parse("mmaml-contrastive"))
    fit = sample_tasks(mixture, 300, cfg.shape, 101)
    test = sample_tasks(mixture, 200, cfg.shape, 202)
    router = fit_task_clusters(embed_tasks(trained, fit), 3, 0)
    Zt = embed_tasks(trained, test)
    bank = build_expert_bank(trained.model, router, "head")

    def forbidden(*a, **k):
        raise AssertionError("gradient step during embedding routing")

    monkeypatch.setattr(routing, "inner_adapt", forbidden)
    monkeypatch.setattr(metalearn, "adapt_params", forbidden)
    monkeypatch.setattr(torch.autograd, "grad", forbidden)
    before = {n: p.detach().clone() for n, p in trained.model.named_parameters()}
    routes = [route_task(t, bank, "embedding", lambda t: task_embedding(trained.model, t, "set-encoder")) for t in test]
    unchanged = all(torch.equal(p.detach(), before[n]) for n, p in trained.model.named_parameters())

    C = router.centers
    brute = [min(range(3), key=lambda j: (sum((float(z[d]) - float(C[j][d])) ** 2 for d in range(len(z))), j)) for z in Zt]
    acc = matched_accuracy(routes, [t.domain_id for t in test])
    ok = acc >= 0.95 and routes == brute and unchanged
    criterion(5, ok, f"routing accuracy {acc:.3f} >= 0.95; brute-force agreement {routes == brute} on 200 tasks; no gradient steps {unchanged}")


# ---------------------------------------------------------------------------
# 6. parameter accounting


def test_criterion_6_parameter_accounting(criterion):
    model = build_model(ModelConfig(input_shape=(1, 28, 28), ways=5), 0)
    # 3x3 convs with 32 channels; 28 -> 1 spatially after four pools, so the head sees 32 features
    hand_blocks = [1 * 32 * 9 + 32] + [32 * 32 * 9 + 32] * 3
    hand_head = 32 * 5 + 5
    N_hand = sum(hand_blocks) + hand_head
    N = count_parameters(model)
    exhaustive = sum(int(np.prod(p.shape)) for p in model.task_params().values())
    M = 3
    router = ClusterModel(np.eye(M, 4))
    full = account_parameters(build_expert_bank(model, router, "full"))
    head_bank = build_expert_bank(model, router, "head")
    head = account_parameters(head_bank)
    n_exh = sum(int(np.prod(t.shape)) for t in head_bank.experts[0].values())
    adapted, _, frac = scope_fraction(model, "head")
    ok = (
        N == exhaustive == N_hand
        and full.total_stored == N + M * N
        and head.total_stored == N + M * n_exh
        and head.per_expert == n_exh == hand_head == adapted < N
        and abs(frac - hand_head / N_hand) < 1e-15
    )
    criterion(
        6,
        ok,
        f"N = {N} (hand {N_hand}); full bank {full.total_stored} = N + M*N; head bank {head.total_stored} = N + M*n with n = {n_exh}; "
        f"head fraction {frac:.4%} (reference only: 52.9% of 484372)",
    )


# ---------------------------------------------------------------------------
# 7. collapse control


def test_criterion_7_collapse_control(criterion):
    mixture = synthetic_vector_mixture(0)
    tasks = sample_tasks(mixture, 150, (5, 1, 5), 777)
    share = {}
    for w in (0.0, 1.0):
        cfg = TrainConfig(episodes=200, batch_size=8, query=5, entropy_weight=w)
        trained = meta_train(cfg, mixture, Method.parse("mmaml-clustering"), init_hook=collapsed_cluster_init(8.0))
        share[w] = max_cluster_share(trained, tasks)
    ok = share[1.0] < 0.6 and share[0.0] > 0.9
    criterion(7, ok, f"max cluster share from collapsed init: entropy_weight=1 -> {share[1.0]:.3f} (< 0.6), entropy_weight=0 -> {share[0.0]:.3f} (> 0.9)")


# ---------------------------------------------------------------------------
# 8. contrastive benefit


@pytest.mark.slow
def test_criterion_8_contrastive_benefit(criterion):
    t0 = time.time()
    mixture = synthetic_image_mixture(0)
    acc = {}
    for name in ("mmaml-plain", "mmaml-contrastive", "mmaml-supervised"):
        cfg = TrainConfig(episodes=600, batch_size=8, query=5)
        trained = meta_train(cfg, mixture, Method.parse(name))
        acc[name] = evaluate_few_shot(trained, mixture, 300, 4242).average[0]
    elapsed = time.time() - t0
    plain, con, sup = acc["mmaml-plain"], acc["mmaml-contrastive"], acc["mmaml-supervised"]
    ok = con >= plain and sup >= con - 0.02 and elapsed <= 1800
    criterion(8, ok, f"accuracy plain {plain:.4f} <= contrastive {con:.4f}; supervised {sup:.4f} >= contrastive - 0.02; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. determinism and persistence


def test_criterion_9_determinism(criterion, tmp_path):
    mixture = synthetic_vector_mixture(0)
    cfg = TrainConfig(episodes=20, batch_size=4, query=3)
    method = Method.parse("mmaml-contrastive")
    a = meta_train(cfg, mixture, method, log_path=tmp_path / "a.jsonl")
    meta_train(cfg, mixture, method, log_path=tmp_path / "b.jsonl")
    same_log = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    save_checkpoint(a.model, tmp_path / "ckpt")
    restored = load_checkpoint(tmp_path / "ckpt")
    tasks = sample_tasks(mixture, 40, cfg.shape, 9)
    state = cfg.adapt_state(method)
    r0 = evaluate_tasks(a.model, tasks, state)
    r1 = evaluate_tasks(restored, tasks, state)
    same_eval = r0.episode_accuracies == r1.episode_accuracies and r0.average == r1.average
    criterion(9, same_log and same_eval, f"byte-identical logs {same_log}; checkpoint round trip preserves evaluation {same_eval}")
