"""Command-line experiment runner.

    taskcl train|eval|ablate-aug|route|probe|report [--config PATH] [--seed INT] [--out DIR]

Exit codes: 0 success, 1 usage/config/missing input, 2 numerical failure.
Artifacts are deterministic given config and seed; wall-clock data goes to
the ``meta.json`` sidecar only.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import evalkit, plotting
from .config import ExperimentConfig, load_config
from .episodes import EpisodeError, hidden_domains, sample_tasks
from .experiments import ablation_row, embed_tasks, task_embedding
from .metalearn import (
    ConfigError,
    NumericalError,
    TrainedModel,
    embedding_mode_for,
    evaluate_tasks,
    load_checkpoint,
    meta_train,
)
from .routing import (
    FineTuneSpec,
    account_parameters,
    build_expert_bank,
    count_parameters,
    fit_task_clusters,
    load_bank,
    nearest_center,
    save_bank,
    scope_fraction,
    trial_adapted_vector,
    write_centers,
)
from .seeding import derive_seed

log = logging.getLogger("taskcl")


class InputError(RuntimeError):
    """A referenced artifact is missing."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(out: Path, command: str, cfg: ExperimentConfig | None) -> None:
    meta_path = out / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta[command] = {
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "seed": cfg.seed if cfg else None,
    }
    _write_json(meta_path, meta)


def _trained_from_checkpoint(cfg: ExperimentConfig) -> TrainedModel:
    ckpt = cfg.out / "checkpoint" / "final"
    if not (ckpt / "manifest.json").exists():
        raise InputError(f"no checkpoint at {ckpt}; run `taskcl train` first")
    return TrainedModel(load_checkpoint(ckpt), cfg.method, cfg.train)


def _eval_tasks(cfg: ExperimentConfig, purpose: str, count: int):
    return sample_tasks(cfg.mixture(), count, cfg.train.shape, derive_seed(cfg.seed, purpose))


def _embedding_report(cfg: ExperimentConfig, trained: TrainedModel, out: Path, tag: str = "") -> dict:
    """Embed held-out tasks, dump them, and compute DB, probe, clusters and projection."""
    tasks = _eval_tasks(cfg, "embed-tasks", cfg.eval.tasks)
    Z = embed_tasks(trained, tasks)
    domains = [t.domain_id for t in tasks]
    evalkit.write_embeddings(out / f"embeddings{tag}.csv", [t.origin_id for t in tasks], Z, domains)
    router = fit_task_clusters(Z, cfg.clusters, derive_seed(cfg.seed, "kmeans"))
    assign = nearest_center(Z, router.centers)
    heat = evalkit.cluster_domain_matrix(assign.tolist(), domains, clusters=range(router.k))
    coords = evalkit.project_2d(Z)
    plotting.plot_heatmap(heat.matrix, heat.clusters, heat.domains, out / f"heatmap{tag}.png")
    plotting.plot_projection(coords, domains, out / f"projection{tag}.png")
    with open(out / f"projection{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_id", "domain_id", "pc1", "pc2"])
        for t, (a, b) in zip(tasks, coords):
            w.writerow([t.origin_id, t.domain_id, repr(float(a)), repr(float(b))])
    return {
        "db_index": evalkit.davies_bouldin(Z, domains),
        "probe_accuracy": evalkit.linear_probe(Z, domains, cfg.seed),
        "heatmap": heat.matrix.tolist(),
        "heatmap_clusters": list(heat.clusters),
        "heatmap_domains": heat.domains,
        "projection_2d": coords.tolist(),
        "cluster_purity": evalkit.matched_accuracy(assign, domains),
    }


# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.source)
    mixture = cfg.mixture()
    trained = meta_train(
        cfg.train,
        mixture,
        cfg.method,
        model_overrides=cfg.model,
        clusters=cfg.clusters,
        checkpoint_dir=out / "checkpoint",
        log_path=out / "train_log.jsonl",
    )
    plotting.plot_training_curve(trained.log, out / "training_curve.png")
    state = cfg.train.adapt_state(cfg.method)
    acc = evaluate_tasks(trained.model, _eval_tasks(cfg, "eval", cfg.eval.episodes), state)
    emb = _embedding_report(cfg, trained, out)
    report = evalkit.MetricsReport(
        db_index=emb["db_index"],
        probe_accuracy=emb["probe_accuracy"],
        accuracy_by_domain={k: list(v) for k, v in acc.per_domain.items()},
        average_accuracy=acc.average,
        heatmap=emb["heatmap"],
        heatmap_clusters=emb["heatmap_clusters"],
        heatmap_domains=emb["heatmap_domains"],
        projection_2d=emb["projection_2d"],
        extra={"method": cfg.method.name, "steps": cfg.train.episodes, "cluster_purity": emb["cluster_purity"]},
    )
    report.write(out / "report.json")
    print(f"trained {cfg.method.name} for {cfg.train.episodes} steps: accuracy {acc.average[0]:.4f} +- {acc.average[1]:.4f}")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    trained = _trained_from_checkpoint(cfg)
    acc = evaluate_tasks(trained.model, _eval_tasks(cfg, "eval", cfg.eval.episodes), cfg.train.adapt_state(cfg.method))
    _write_json(cfg.out / "eval.json", acc.to_json())
    print(f"accuracy {acc.average[0]:.4f} +- {acc.average[1]:.4f} over {len(acc.episode_accuracies)} episodes")
    return 0


def cmd_ablate_aug(cfg: ExperimentConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    mixture = cfg.mixture()
    tasks = _eval_tasks(cfg, "embed-tasks", cfg.eval.tasks)
    domains = [t.domain_id for t in tasks]
    rows = []
    for strategy in cfg.eval.strategies:
        row, trained, Z = ablation_row(cfg.train, mixture, cfg.method, strategy, tasks, model_overrides=cfg.model)
        evalkit.write_embeddings(out / f"embeddings_{row['strategy']}.csv", [t.origin_id for t in tasks], Z, domains)
        rows.append(row)
        print(f"{row['strategy']:>22}  DB {row['db']:.4f}  probe {row['probe']:.4f}  few-shot {row['fewshot']:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "DB", "probe_accuracy", "fewshot_accuracy"])
        for r in rows:
            w.writerow([r["strategy"], repr(r["db"]), repr(r["probe"]), repr(r["fewshot"])])
    plotting.plot_ablation(rows, out / "ablation.png")
    return 0


def cmd_route(cfg: ExperimentConfig) -> int:
    trained = _trained_from_checkpoint(cfg)
    model = trained.model
    out = cfg.out
    state = replace(cfg.train.adapt_state(cfg.method), zero_head=False)
    fit_tasks = _eval_tasks(cfg, "route-fit", cfg.eval.tasks)
    test_tasks = _eval_tasks(cfg, "route-eval", cfg.eval.tasks)
    if cfg.eval.routing_mode == "embedding":
        mode = embedding_mode_for(cfg.method, cfg.train)
        if mode == "feature-agg-post":
            mode = "feature-agg-pre"

        def vec(t):
            return task_embedding(model, t, mode)

        space = "embedding"
    else:

        def vec(t):
            return trial_adapted_vector(t, model, state)

        space = "parameter"
    router = fit_task_clusters(np.stack([vec(t) for t in fit_tasks]), cfg.clusters, derive_seed(cfg.seed, "route-kmeans"), space)
    routes = nearest_center(np.stack([vec(t) for t in test_tasks]), router.centers)
    domains = [t.domain_id for t in test_tasks]
    with open(out / "routing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_id", "expert", "domain_id"])
        for t, r in zip(test_tasks, routes):
            w.writerow([t.origin_id, int(r), t.domain_id])
    write_centers(out / "centers.csv", router.centers)
    heat = evalkit.cluster_domain_matrix(routes.tolist(), domains, clusters=range(router.k))
    plotting.plot_heatmap(heat.matrix, heat.clusters, heat.domains, out / "routing_heatmap.png")
    spec = FineTuneSpec(
        tasks=fit_tasks,
        steps=cfg.eval.finetune_steps,
        lr=cfg.eval.finetune_lr,
        embed_fn=vec if space == "embedding" else None,
        mode=space,
        adapt=state,
    )
    # expert construction must not see domain labels
    with hidden_domains():
        bank = build_expert_bank(model, router, cfg.eval.bank_scope, spec)
    save_bank(bank, out / "bank")
    summary = {
        "mode": cfg.eval.routing_mode,
        "clusters": router.k,
        "domains": len(set(domains)),
        "routing_accuracy": evalkit.matched_accuracy(routes, domains),
        "heatmap": heat.matrix.tolist(),
        "empty_clusters": list(heat.empty_rows),
        "bank_scope": bank.scope,
    }
    _write_json(out / "routing.json", summary)
    print(f"routed {len(test_tasks)} tasks to {router.k} experts; matched accuracy {summary['routing_accuracy']:.4f}")
    return 0


def cmd_probe(cfg: ExperimentConfig, embeddings: Path | None) -> int:
    path = embeddings or cfg.out / "embeddings.csv"
    if not Path(path).exists():
        raise InputError(f"embedding dump {path} not found")
    ids, domains, Z = evalkit.read_embeddings(path)
    if any(d == "" for d in domains):
        raise InputError(f"{path} has no domain labels")
    res = evalkit.linear_probe(Z, domains, cfg.seed, detail=True)
    out = {"embeddings": str(path), "accuracy": res.accuracy, "train_size": res.train_size, "test_size": res.test_size, "converged": res.converged}
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "probe.json", out)
    print(f"probe accuracy {res.accuracy:.4f} ({res.test_size} held-out tasks)")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    out = cfg.out
    report_path = out / "report.json"
    if not report_path.exists():
        raise InputError(f"{report_path} not found; run `taskcl train` first")
    rep = json.loads(report_path.read_text())
    lines = [f"method: {cfg.method.name}   seed: {cfg.seed}"]
    mean, ci = rep["average_accuracy"]
    lines.append(f"few-shot accuracy: {mean:.4f} +- {ci:.4f}")
    for dom, (m, c) in sorted(rep["accuracy_by_domain"].items()):
        lines.append(f"  {dom}: {m:.4f} +- {c:.4f}")
    lines.append(f"Davies-Bouldin: {rep['db_index']:.4f}   linear probe: {rep['probe_accuracy']:.4f}")

    ckpt = out / "checkpoint" / "final"
    if not (ckpt / "manifest.json").exists():
        raise InputError(f"no checkpoint at {ckpt}")
    model = load_checkpoint(out / "checkpoint" / "final")
    N = count_parameters(model)
    lines.append(f"task network parameters N = {N}")
    bank_dir = out / "bank"
    M = cfg.clusters
    full_total = N + M * N
    lines.append(f"full-network experts (trial adaptation):  N + M*N = {N} + {M}*{N} = {full_total}")
    if (bank_dir / "bank.json").exists():
        bank = load_bank(bank_dir)
        acct = account_parameters(bank)
        lines.append(f"stored bank ({bank.scope} experts):  {acct.formula()}")
        lines.append(f"  adapted fraction per expert: {acct.adapted_fraction:.4f}")
        if acct.per_expert < N:
            lines.append(f"  saving vs full experts: {full_total - acct.total_stored} parameters ({acct.total_stored / full_total:.1%} of N + M*N)")
    for scope in ("head", "bias", "frozen:3"):
        try:
            a, n, f = scope_fraction(model, scope)
        except ConfigError:
            continue
        lines.append(f"  scope {scope:>8}: n = {a} / {n} ({f:.1%})   N + M*n = {N + M * a}")
    if (out / "routing.json").exists():
        r = json.loads((out / "routing.json").read_text())
        lines.append(f"routing ({r['mode']}): matched accuracy {r['routing_accuracy']:.4f} with k = {r['clusters']} for {r['domains']} domains")
    if (out / "ablation.csv").exists():
        lines.append("augmentation ablation:")
        with open(out / "ablation.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                lines.append(f"  {row['strategy']:>22}  DB {float(row['DB']):.4f}  probe {float(row['probe_accuracy']):.4f}  acc {float(row['fewshot_accuracy']):.4f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskcl", description="Task-level contrastive meta-learning experiments")
    p.add_argument("command", choices=["train", "eval", "ablate-aug", "route", "probe", "report"])
    p.add_argument("--config", type=Path, required=True, help="experiment INI file")
    p.add_argument("--seed", type=int, default=None, help="override the root seed")
    p.add_argument("--out", type=Path, default=None, help="override the output directory")
    p.add_argument("--embeddings", type=Path, default=None, help="embedding CSV for `probe`")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        handlers = {
            "train": cmd_train,
            "eval": cmd_eval,
            "ablate-aug": cmd_ablate_aug,
            "route": cmd_route,
            "report": cmd_report,
        }
        if args.command == "probe":
            code = cmd_probe(cfg, args.embeddings)
        else:
            code = handlers[args.command](cfg)
        _sidecar(cfg.out, args.command, cfg)
        return code
    except (ConfigError, EpisodeError, InputError, evalkit.MetricError) as exc:
        print(f"taskcl: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"taskcl: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
