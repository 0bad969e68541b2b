"""Command-line driver: strict TOML configs, pipelines and machine-readable outputs.

Every run writes its artifacts into ``--out`` plus a ``manifest.json`` that
lists each file with its sha256. JSON artifacts carry the config hash inline,
tabular CSVs carry it in a ``config_hash`` column where they have rows of
results. The only wall-clock value anywhere is ``manifest.json:created``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .bench2d import (
    DATASETS,
    ENERGIES,
    builtin_energy,
    evaluate_sample,
    make_dataset,
    normalized_energy,
    write_points_csv,
)
from .guidance import METHODS, GuidanceModel, default_guidance_spec, one_hot, train_guidance
from .netcore import DivergenceError, TrainConfig, load_network, save_network
from .oracle import EmpiricalPrior, posterior_energy, posterior_guidance, resample_ground_truth
from .prior import PriorModel, default_prior_spec, train_prior
from .sampler import SamplerConfig, sample
from .schedule import Schedule

log = logging.getLogger("cepguide")

KINDS = ("prior", "guidance", "sample", "compare2d", "qgpo", "oracle-grid")
VERBS = {"train-prior": "prior", "train-guidance": "guidance", "sample": "sample",
         "compare2d": "compare2d", "qgpo": "qgpo", "oracle-grid": "oracle-grid"}
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _train(steps, batch_size, learning_rate, hidden=(128, 128, 128)):
    return {"steps": steps, "batch_size": batch_size, "learning_rate": learning_rate,
            "cosine_decay": True, "hidden": list(hidden), "seed": 0}


# Defaults double as the schema: every accepted key appears here, and the
# type of each default is the type the key must have.
DEFAULTS = {
    "kind": "compare2d",
    "seed": 0,
    "data": {"name": "8gaussians", "n": 100_000, "seed": 0},
    "energy": {"name": "linear", "beta": 1.0, "normalize": True, "params": {}},
    "prior": dict(_train(8000, 512, 1e-3), checkpoint=""),
    "guidance": dict(_train(3000, 512, 1e-3), method="CEP", group_size=64, checkpoint=""),
    "sampler": {"method": "solver2", "steps": 25, "scale": 1.0, "n": 4096, "seed": 1, "class_id": -1},
    "compare": {"betas": [1.0, 10.0], "methods": ["NONE", "CEP", "MSE", "EMSE", "DPS"],
                "ground_truth_seed": 7},
    "qgpo": {
        "episodes": 500, "mix": 0.5, "K": 16, "beta": 3.0, "beta_q": 1.0, "gamma": 0.95, "tau": 0.005,
        "double_q": True, "normalize_rewards": True, "scales": [1.0, 2.0, 3.0, 5.0, 8.0, 10.0],
        "eval_episodes": 100, "eval_seed": 1, "eval_steps": 15,
        "behavior": _train(4000, 512, 1e-3),
        "q": _train(4000, 256, 1e-3),
        "guidance": _train(4000, 256, 1e-3),
    },
    "grid": {"lo": -4.0, "hi": 4.0, "n": 41, "times": [0.001, 0.25, 0.5, 0.75, 1.0], "atoms": 2000},
}

# keys whose values are free-form tables (energy parameters)
_OPEN_TABLES = {"energy.params"}


def _merge(defaults, given, prefix=""):
    out = {}
    for key, val in given.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {name!r}")
        want = defaults[key]
        if name in _OPEN_TABLES:
            if not isinstance(val, dict):
                raise ConfigError(f"{name!r} must be a table")
            out[key] = copy.deepcopy(val)
        elif isinstance(want, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{name!r} must be a table")
            out[key] = _merge(want, val, name + ".")
        elif isinstance(want, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{name!r} must be a boolean")
            out[key] = val
        elif isinstance(want, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{name!r} must be a number")
            out[key] = float(val)
        elif isinstance(want, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{name!r} must be an integer")
            out[key] = val
        elif isinstance(want, list):
            if not isinstance(val, list):
                raise ConfigError(f"{name!r} must be an array")
            proto = type(want[0]) if want else None
            if proto is float:
                if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val):
                    raise ConfigError(f"{name!r} must be an array of numbers")
                val = [float(v) for v in val]
            elif proto is not None and any(not isinstance(v, proto) for v in val):
                raise ConfigError(f"{name!r} must be an array of {proto.__name__}")
            out[key] = val
        elif not isinstance(val, type(want)):
            raise ConfigError(f"{name!r} must be of type {type(want).__name__}")
        else:
            out[key] = val
    for key, want in defaults.items():
        if key not in out:
            out[key] = copy.deepcopy(want)
    return out


@dataclass
class RunConfig:
    """Fully resolved configuration; ``raw`` holds every section with defaults filled in."""
    raw: dict

    @property
    def kind(self) -> str:
        return self.raw["kind"]

    def __getitem__(self, key):
        return self.raw[key]

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed in the config with ``seed``-derived values."""
        raw = copy.deepcopy(self.raw)
        raw["seed"] = seed
        raw["data"]["seed"] = seed
        raw["prior"]["seed"] = seed
        raw["guidance"]["seed"] = seed
        raw["sampler"]["seed"] = seed + 1
        raw["compare"]["ground_truth_seed"] = seed + 7
        for sec in ("behavior", "q", "guidance"):
            raw["qgpo"][sec]["seed"] = seed
        raw["qgpo"]["eval_seed"] = seed + 1
        return validate(raw)


def validate(raw: dict) -> RunConfig:
    if raw["kind"] not in KINDS:
        raise ConfigError(f"unknown experiment kind {raw['kind']!r}; choose from {KINDS}")
    if raw["data"]["name"] not in DATASETS:
        raise ConfigError(f"unknown dataset {raw['data']['name']!r}")
    if raw["energy"]["name"] not in ENERGIES:
        raise ConfigError(f"unknown energy {raw['energy']['name']!r}")
    betas = [raw["energy"]["beta"], *raw["compare"]["betas"], raw["qgpo"]["beta"], raw["qgpo"]["beta_q"]]
    if any(not isinstance(b, (int, float)) or b < 0 or not np.isfinite(b) for b in betas):
        raise ConfigError("beta must be a finite number >= 0")
    for m in [raw["guidance"]["method"], *raw["compare"]["methods"]]:
        if m not in METHODS:
            raise ConfigError(f"unknown guidance method {m!r}")
    if raw["sampler"]["method"] not in ("euler", "solver2"):
        raise ConfigError(f"unknown sampler {raw['sampler']['method']!r}")
    if raw["data"]["n"] < 1 or raw["sampler"]["n"] < 1 or raw["sampler"]["steps"] < 1:
        raise ConfigError("data.n, sampler.n and sampler.steps must be positive")
    if not 0.0 <= raw["qgpo"]["mix"] <= 1.0:
        raise ConfigError("qgpo.mix must be in [0, 1]")
    if raw["grid"]["n"] < 0 or any(not 0.0 < t <= 1.0 for t in raw["grid"]["times"]):
        raise ConfigError("grid.n must be >= 0 and grid times in (0, 1]")
    try:
        builtin_energy(raw["energy"]["name"], 1.0, **raw["energy"]["params"])
    except TypeError as exc:
        raise ConfigError(f"bad energy.params: {exc}") from exc
    return RunConfig(raw)


def parse_config_text(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return validate(_merge(DEFAULTS, doc))


def parse_config(path) -> RunConfig:
    """Strict parse of a TOML run config; unknown keys and bad values raise ``ConfigError``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config_text(path.read_text())
    log.info("resolved config %s: %s", cfg.config_hash(), json.dumps(cfg.raw, sort_keys=True))
    return cfg


# ---------------------------------------------------------------- plumbing

def _train_config(sec: dict) -> TrainConfig:
    return TrainConfig(steps=sec["steps"], batch_size=sec["batch_size"], learning_rate=sec["learning_rate"],
                       cosine_decay=sec["cosine_decay"])


class Run:
    """Output directory bookkeeping for one invocation."""

    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_json(self, name: str, doc: dict) -> Path:
        p = self.path(name)
        doc = {"config_hash": self.cfg.config_hash(), **doc}
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p

    def finish(self) -> Path:
        entries = {}
        for name in sorted(set(self.files)):
            p = self.out / name
            if p.exists():
                entries[name] = hashlib.sha256(p.read_bytes()).hexdigest()
        doc = {"config_hash": self.cfg.config_hash(), "kind": self.cfg.kind, "version": __version__,
               "config": self.cfg.raw, "artifacts": entries,
               "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
        p = self.out / "manifest.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p


def _dataset(cfg: RunConfig):
    d = cfg["data"]
    return make_dataset(d["name"], d["n"], d["seed"])


def _energy(cfg: RunConfig, points, beta=None):
    e = cfg["energy"]
    spec = builtin_energy(e["name"], e["beta"] if beta is None else beta, **e["params"])
    return normalized_energy(spec, points) if e["normalize"] else spec


def _save_prior(run: Run, name: str, prior: PriorModel):
    for suffix in (".json", ".bin"):
        run.files.append(name + suffix)
    save_network(run.out / name, prior.net, {"config_hash": run.cfg.config_hash(), "role": "prior",
                                             "loss_curve": prior.loss_curve})


def _load_prior(path) -> PriorModel:
    net, meta = load_network(path)
    return PriorModel(net, Schedule(), meta.get("loss_curve", []))


def _get_prior(cfg: RunConfig, run: Run | None, points, force_train: bool = False) -> PriorModel:
    sec = cfg["prior"]
    if sec["checkpoint"] and not force_train:
        return _load_prior(sec["checkpoint"])
    log.info("training prior for %d steps", sec["steps"])
    spec = default_prior_spec(points.shape[1], 0, sec["hidden"])
    prior = train_prior(points, spec, _train_config(sec), sec["seed"])
    if run is not None:
        _save_prior(run, "prior", prior)
    return prior


def _save_guidance(run: Run, name: str, g: GuidanceModel):
    meta = {"config_hash": run.cfg.config_hash(), "role": "guidance", "method": g.method, "beta": g.beta,
            "num_classes": g.num_classes, "loss_curve": g.loss_curve}
    if g.net is None:
        run.write_json(name + ".json", {"format": "cepguide-guidance/1", "metadata": meta})
        return
    for suffix in (".json", ".bin"):
        run.files.append(name + suffix)
    save_network(run.out / name, g.net, meta)


def load_guidance(path, prior: PriorModel | None = None, energy=None) -> GuidanceModel:
    """Rebuild a guidance model from a checkpoint written by ``train-guidance``."""
    doc = json.loads(Path(path).with_suffix(".json").read_text())
    if doc.get("format") == "cepguide-guidance/1":
        meta = doc["metadata"]
        return GuidanceModel(meta["method"], meta["beta"], Schedule(), prior=prior,
                             energy=energy.with_beta(meta["beta"]) if energy is not None else None)
    net, meta = load_network(path)
    return GuidanceModel(meta["method"], meta["beta"], Schedule(), net=net, num_classes=meta.get("num_classes"),
                         loss_curve=meta.get("loss_curve", []))


def _sampler_config(cfg: RunConfig, scale=None) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(steps=s["steps"], method=s["method"], guidance_scale=s["scale"] if scale is None else scale,
                         seed=s["seed"])


# ---------------------------------------------------------------- pipelines

def run_train_prior(cfg: RunConfig, out) -> Path:
    run = Run(cfg, out)
    ds = _dataset(cfg)
    write_points_csv(run.path("data.csv"), ds.points, labels=ds.labels)
    _get_prior(cfg, run, ds.points, force_train=True)
    return run.finish()


def run_train_guidance(cfg: RunConfig, out) -> Path:
    run = Run(cfg, out)
    ds = _dataset(cfg)
    sec = cfg["guidance"]
    method = sec["method"]
    energy = _energy(cfg, ds.points)
    conditional = method in ("CEP_COND", "CLASSIFIER")
    num_classes = None
    if conditional:
        if ds.labels is None:
            raise ConfigError(f"{method} needs a labelled dataset; {cfg['data']['name']} has no labels")
        num_classes = int(ds.labels.max()) + 1
    prior = _get_prior(cfg, run, ds.points) if method == "DPS" else None
    spec = None
    if method not in ("DPS", "NONE"):
        spec = default_guidance_spec(2, num_classes if conditional else 0, sec["hidden"])
    g = train_guidance(method, ds.points, None if conditional else energy, spec, _train_config(sec), sec["seed"],
                       sec["group_size"], labels=ds.labels if conditional else None, num_classes=num_classes,
                       prior=prior)
    _save_guidance(run, "guidance", g)
    return run.finish()


def run_sample(cfg: RunConfig, out) -> Path:
    run = Run(cfg, out)
    ds = _dataset(cfg)
    if not cfg["prior"]["checkpoint"]:
        raise ConfigError("sample needs prior.checkpoint")
    prior = _load_prior(cfg["prior"]["checkpoint"])
    energy = _energy(cfg, ds.points)
    guidance = None
    if cfg["guidance"]["checkpoint"]:
        guidance = load_guidance(cfg["guidance"]["checkpoint"], prior, energy)
    cond = None
    if cfg["sampler"]["class_id"] >= 0:
        if guidance is None or guidance.num_classes is None:
            raise ConfigError("sampler.class_id needs a conditional guidance checkpoint")
        cond = one_hot(np.array([cfg["sampler"]["class_id"]]), guidance.num_classes)[0]
    x = sample(prior, guidance, _sampler_config(cfg), n=cfg["sampler"]["n"], dim=prior.data_dim, cond=cond)
    write_points_csv(run.path("samples.csv"), x, energies=energy.energy(x))
    return run.finish()


TABLE_COLUMNS = ["beta", "method", "mmd2", "hist_tv", "mean_energy", "ground_truth_mean_energy", "n_samples",
                 "config_hash"]


def run_compare2d(cfg: RunConfig, out) -> list[dict]:
    """Train each guidance method per beta, sample, and score against resampled ground truth."""
    run = Run(cfg, out)
    ds = _dataset(cfg)
    prior = _get_prior(cfg, run, ds.points)
    sec = cfg["guidance"]
    n = cfg["sampler"]["n"]
    rows = []
    for beta in cfg["compare"]["betas"]:
        energy = _energy(cfg, ds.points, beta)
        gt = resample_ground_truth(ds.points, energy, n, cfg["compare"]["ground_truth_seed"])
        write_points_csv(run.path(f"ground_truth_beta{beta:g}.csv"), gt, energies=energy.energy(gt))
        for method in cfg["compare"]["methods"]:
            log.info("compare2d beta=%g method=%s", beta, method)
            spec = default_guidance_spec(2, 0, sec["hidden"]) if method not in ("DPS", "NONE") else None
            g = train_guidance(method, ds.points, energy, spec, _train_config(sec), sec["seed"], sec["group_size"],
                               prior=prior)
            x = sample(prior, g, _sampler_config(cfg), n=n, dim=2)
            write_points_csv(run.path(f"samples_{method}_beta{beta:g}.csv"), x, energies=energy.energy(x))
            rep = evaluate_sample(x, gt, energy)
            rows.append({"beta": beta, "method": method, "mmd2": rep.mmd2, "hist_tv": rep.hist_tv,
                         "mean_energy": rep.mean_energy,
                         "ground_truth_mean_energy": float(np.mean(energy.energy(gt))),
                         "n_samples": rep.n_samples, "config_hash": cfg.config_hash()})
    with run.path("compare2d.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    run.finish()
    return rows


def run_qgpo(cfg: RunConfig, out) -> dict:
    """Algorithm phases in order: behavior model, support actions, Q then guidance, then the s-sweep."""
    from . import qgpo

    run = Run(cfg, out)
    q_cfg = cfg["qgpo"]
    env = qgpo.PointGoalEnv(gamma=q_cfg["gamma"])
    phases = []
    ds = qgpo.generate_behavior_dataset(env, q_cfg["episodes"], q_cfg["mix"], cfg["seed"])
    ds.to_csv(run.path("transitions.csv"))
    phases.append("dataset")

    b = q_cfg["behavior"]
    behavior = qgpo.train_behavior_policy(ds, qgpo.default_behavior_spec(b["hidden"]), _train_config(b), b["seed"])
    _save_prior(run, "behavior", behavior)
    phases.append("behavior")

    uniq, _, next_index = qgpo.support_index(ds)
    support = qgpo.generate_support_actions(
        behavior, uniq, q_cfg["K"], SamplerConfig(steps=qgpo.SUPPORT_STEPS, guidance_scale=0.0, seed=cfg["seed"]))
    support.to_json(run.path("support.json"))
    phases.append("support")

    qs = q_cfg["q"]
    q = qgpo.train_q(ds, support, next_index, qgpo.default_q_spec(qs["hidden"]), _train_config(qs), qs["seed"],
                     q_cfg["gamma"], q_cfg["beta_q"], q_cfg["tau"], q_cfg["double_q"], q_cfg["normalize_rewards"])
    phases.append("q")
    gs = q_cfg["guidance"]
    guidance = qgpo.train_qgpo_guidance(support, q, q_cfg["beta"], default_guidance_spec(2, 2, gs["hidden"]),
                                        _train_config(gs), gs["seed"])
    _save_guidance(run, "guidance", guidance)
    phases.append("guidance")

    results = []
    for s in [0.0, *q_cfg["scales"]]:
        r = qgpo.evaluate_policy(env, behavior, guidance if s > 0 else None, s, q_cfg["eval_episodes"],
                                 q_cfg["eval_seed"], q_cfg["eval_steps"])
        log.info("qgpo s=%g return %.3f +- %.3f", s, r.mean, r.stderr)
        results.append({"s": s, "mean": r.mean, "std": r.std, "stderr": r.stderr})
    phases.append("evaluate")
    best = max(results[1:], key=lambda r: r["mean"]) if len(results) > 1 else results[0]
    seeds = {"dataset": cfg["seed"], "behavior": b["seed"], "q": qs["seed"], "guidance": gs["seed"],
             "support": cfg["seed"], "eval": q_cfg["eval_seed"]}
    report = {"phases": phases, "returns": results, "best_s": best["s"],
              "dataset_mean_return": float(ds.episode_returns.mean()),
              "q_loss_final": q.loss_curve[-1] if q.loss_curve else None, "seeds": seeds}
    run.write_json("qgpo_report.json", report)
    run.finish()
    return {"config_hash": cfg.config_hash(), **report}


def run_oracle_grid(cfg: RunConfig, out) -> Path:
    """Exact ``E_t`` and its gradient (and ``f_phi`` if a checkpoint is set) on an ``(x, t)`` grid."""
    run = Run(cfg, out)
    ds = _dataset(cfg)
    energy = _energy(cfg, ds.points)
    g = cfg["grid"]
    m = min(g["atoms"], len(ds))
    atoms = ds.points[np.random.default_rng(cfg["seed"]).choice(len(ds), m, replace=False)]
    prior = EmpiricalPrior(atoms, Schedule())
    guidance = load_guidance(cfg["guidance"]["checkpoint"]) if cfg["guidance"]["checkpoint"] else None
    axis = np.linspace(g["lo"], g["hi"], g["n"])
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    header = ["x1", "x2", "t", "energy", "grad1", "grad2"] + (["f_phi"] if guidance is not None else [])
    path = run.path("oracle_grid.csv")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in g["times"] if len(pts) else []:
            e = posterior_energy(prior, energy, pts, t)
            gr = posterior_guidance(prior, energy, pts, t)
            f = guidance.value(pts, t) if guidance is not None else None
            for i in range(len(pts)):
                row = [pts[i, 0], pts[i, 1], t, e[i], gr[i, 0], gr[i, 1]] + ([f[i]] if f is not None else [])
                w.writerow([repr(float(v)) for v in row])
    run.finish()
    return path


RUNNERS = {"prior": run_train_prior, "guidance": run_train_guidance, "sample": run_sample,
           "compare2d": run_compare2d, "qgpo": run_qgpo, "oracle-grid": run_oracle_grid}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cepguide", description="Energy-guided diffusion sampling experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", required=True, help="TOML run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        kind = VERBS[args.verb]
        if cfg.kind != kind:
            # the verb decides what runs; keep the hash honest about it
            cfg = validate({**cfg.raw, "kind": kind})
        RUNNERS[kind](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
