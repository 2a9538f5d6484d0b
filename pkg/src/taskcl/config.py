"""Experiment configuration files.

One experiment is one INI file::

    [experiment]
    seed = 0
    method = mmaml-contrastive
    out = runs/demo

    [episode]
    ways = 5
    shots = 1
    query = 15

    [train]
    episodes = 300
    lambda_con = 1.0

    [augment]
    strategy = mix

    [domain img0]
    kind = synthetic-image
    family = blobs
    width = 1.5

Every section and key is validated before any compute; unknown keys are
rejected. ``[domain NAME]`` sections may repeat; ``weight`` sets the mixture
probability (uniform when omitted everywhere).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .episodes import EpisodeError, MixtureSpec, build_domain
from .metalearn import ConfigError, Method, TrainConfig
from .seeding import derive_seed
from .taskaug import STRATEGY_ROWS, AugmentError, AugmentSpec, parse_strategy

_EXPERIMENT_KEYS = {"seed", "method", "out"}
_EPISODE_KEYS = {"ways", "shots", "query"}
_TRAIN_KEYS = {
    "episodes", "batch_size", "outer_lr", "inner_lr", "inner_steps", "lambda_con", "temperature",
    "cluster_temperature", "entropy_weight", "embedding", "first_order", "zero_head",
    "divergence_threshold", "divergence_patience", "checkpoint_every",
}
_AUGMENT_KEYS = {"strategy", "transforms", "mix_count", "augment_query"}
_MODEL_KEYS = {"channels", "conv_blocks", "hidden", "mlp_layers", "embed_dim", "proj_dims", "label_conditioning", "norm"}
_EVAL_KEYS = {
    "episodes", "tasks", "clusters", "bank_scope", "finetune_steps", "finetune_lr", "routing_mode", "strategies",
}


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 200
    tasks: int = 300
    clusters: int = 0
    bank_scope: str = "head"
    finetune_steps: int = 100
    finetune_lr: float = 1e-3
    routing_mode: str = "embedding"
    strategies: tuple[str, ...] = STRATEGY_ROWS


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    method: Method
    out: Path
    train: TrainConfig
    domains: tuple[dict, ...]
    weights: tuple[float, ...] | None
    model: dict = field(default_factory=dict)
    eval: EvalSettings = field(default_factory=EvalSettings)
    source: str = ""

    def mixture(self) -> MixtureSpec:
        specs = []
        for i, d in enumerate(self.domains):
            d = dict(d)
            name = d.pop("id")
            specs.append(build_domain(d, derive_seed(self.seed, "domain", name), name))
        if self.weights is None:
            return MixtureSpec.uniform(specs)
        return MixtureSpec(tuple(specs), self.weights)

    @property
    def clusters(self) -> int:
        return self.eval.clusters or len(self.domains)


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _check(section: str, items: dict, allowed: set) -> None:
    unknown = set(items) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def _num(section, key, value, kind):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {value!r} is not a valid {kind.__name__}") from None


def load_config(path: str | Path, seed: int | None = None, out: str | Path | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    return parse_config(text, seed=seed, out=out, base_dir=path.parent)


def parse_config(text: str, seed: int | None = None, out=None, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    known = {"experiment", "episode", "train", "augment", "model", "eval"}
    domains, weights = [], []
    for sec in cp.sections():
        if sec.startswith("domain"):
            name = sec[len("domain"):].strip() or f"d{len(domains)}"
            items = dict(cp[sec])
            if "kind" not in items:
                raise ConfigError(f"[{sec}] needs kind=")
            if "weight" in items:
                weights.append(_num(sec, "weight", items.pop("weight"), float))
            if items.get("kind") in ("image-folder", "folder") and base_dir is not None and "root" in items:
                root = Path(items["root"])
                items["root"] = str(root if root.is_absolute() else base_dir / root)
            items["id"] = name
            domains.append(items)
        elif sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    if not domains:
        raise ConfigError("config defines no [domain ...] sections")
    if weights and len(weights) != len(domains):
        raise ConfigError("give weight= for every domain or for none")

    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    _check("experiment", exp, _EXPERIMENT_KEYS)
    ep = dict(cp["episode"]) if cp.has_section("episode") else {}
    _check("episode", ep, _EPISODE_KEYS)
    tr = dict(cp["train"]) if cp.has_section("train") else {}
    _check("train", tr, _TRAIN_KEYS)
    au = dict(cp["augment"]) if cp.has_section("augment") else {}
    _check("augment", au, _AUGMENT_KEYS)
    mo = dict(cp["model"]) if cp.has_section("model") else {}
    _check("model", mo, _MODEL_KEYS)
    ev = dict(cp["eval"]) if cp.has_section("eval") else {}
    _check("eval", ev, _EVAL_KEYS)

    root_seed = seed if seed is not None else _num("experiment", "seed", exp.get("seed", "0"), int)
    method = Method.parse(exp.get("method", "maml-plain"))

    try:
        mix_count = au.get("mix_count", "max")
        aug = AugmentSpec(
            strategy=parse_strategy(au.get("strategy", "mix")),
            transforms=tuple(t.strip() for t in au["transforms"].split(",") if t.strip()) if "transforms" in au else AugmentSpec().transforms,
            mix_count=mix_count if mix_count == "max" else _num("augment", "mix_count", mix_count, int),
            augment_query=_bool(au.get("augment_query", "false")),
        )
    except AugmentError as exc:
        raise ConfigError(str(exc)) from None

    ints = {"episodes", "batch_size", "inner_steps", "divergence_patience", "checkpoint_every"}
    bools = {"first_order", "zero_head"}
    train_kwargs = {}
    for k, v in tr.items():
        if k == "embedding":
            train_kwargs[k] = v.strip()
        elif k in bools:
            train_kwargs[k] = _bool(v)
        else:
            train_kwargs[k] = _num("train", k, v, int if k in ints else float)
    for k, v in ep.items():
        train_kwargs[k] = _num("episode", k, v, int)
    train = TrainConfig(seed=root_seed, augmentation=aug, **train_kwargs)

    model = {}
    for k, v in mo.items():
        if k == "proj_dims":
            model[k] = tuple(_num("model", k, x, int) for x in v.replace(",", " ").split())
        elif k == "norm":
            model[k] = v.strip()
        elif k == "label_conditioning":
            model[k] = _bool(v)
        else:
            model[k] = _num("model", k, v, int)

    ev_kwargs = {}
    for k, v in ev.items():
        if k in ("bank_scope", "routing_mode"):
            ev_kwargs[k] = v.strip()
        elif k == "strategies":
            names = tuple(s.strip() for s in v.split(",") if s.strip())
            for s in names:
                parse_strategy(s)
            ev_kwargs[k] = names
        elif k == "finetune_lr":
            ev_kwargs[k] = _num("eval", k, v, float)
        else:
            ev_kwargs[k] = _num("eval", k, v, int)
    settings = EvalSettings(**ev_kwargs)
    if settings.routing_mode not in ("embedding", "trial-adaptation"):
        raise ConfigError(f"unknown routing_mode {settings.routing_mode!r}")
    if settings.bank_scope not in ("full", "head", "bias") and not settings.bank_scope.startswith("frozen:"):
        raise ConfigError(f"unknown bank_scope {settings.bank_scope!r}")
    if settings.episodes < 2 or settings.tasks < 2:
        raise ConfigError("[eval] episodes and tasks must be at least 2")

    out_dir = Path(out) if out is not None else Path(exp.get("out", "runs/experiment"))
    cfg = ExperimentConfig(
        seed=root_seed,
        method=method,
        out=out_dir,
        train=train,
        domains=tuple(domains),
        weights=tuple(weights) if weights else None,
        model=model,
        eval=settings,
        source=text,
    )
    try:
        cfg.mixture()
    except EpisodeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
