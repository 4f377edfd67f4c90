"""Command-line entry point: ``esvae <command> [--config PATH] [--set K=V ...] --out DIR``.

Every command resolves a JSON run configuration (defaults, then the config
file, then ``--set`` overrides, then ``--seed``), runs, and writes its outputs
into a temporary directory that atomically replaces ``--out`` on success.
The output directory always holds ``config.json`` (the resolved config) and
``manifest.json`` (config echo, seeds, versions, content hashes, timestamp).
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime
import json
import logging
import os
import platform
import sys
from dataclasses import replace

import numba
import numpy as np

from . import __version__
from . import artifacts as art
from . import data as dp
from . import evaluation as ev
from . import pipeline as pl
from . import registration as reg
from . import rvae
from . import trajectory as tr
from .errors import ConfigError, ESVAEError, InvalidInputError

log = logging.getLogger("esvae")

PROFILES = {
    "stroke": dict(latent_dim=38, hidden=128, decoder_hidden=16, kl_weight=2.0 ** -3,
                   epochs=100, batch_size=None),
    "ntu": dict(latent_dim=48, hidden=768, decoder_hidden=768, kl_weight=1e-4,
                epochs=150, batch_size=64),
}
# keys whose default depends on the profile
_PROFILE_KEYS = {
    "model": ("latent_dim", "hidden", "decoder_hidden"),
    "training": ("kl_weight", "epochs", "batch_size"),
}

DEFAULTS = {
    "data": {
        "path": None,
        "format": None,
        "T": 50,
        "task": "classification",
        "synthetic": {
            "classes": 4, "per_class": 40, "k": 8, "m": 3, "T": 50, "max_severity": 0.3,
            "nuisance": {"rotation": True, "scale": True, "translation": True, "warp": True},
            "format": "json",
        },
    },
    "alignment": {"stage": "kendall_tsrvf"},
    "registration": {"max_iterations": 40, "step_size": 0.1, "tolerance": 1e-5, "init": "medoid"},
    "model": {"profile": "stroke", "latent_dim": None, "hidden": None, "decoder_hidden": None,
              "loss_mode": "geodesic", "path": None},
    "training": {"kl_weight": None, "learning_rate": 1e-3, "epochs": None, "batch_size": None,
                 "dropout_rate": 0.1},
    "eval": {"k": 5, "replicates": 2000, "protocol": "l5so", "group": 5, "n_folds": 30},
    "sphere": {"n_points": 500, "noise_level": 0.05, "curve": "arc", "amplitude": 0.6,
               "span": 2.0 * np.pi / 3.0, "latent_dim": 1, "hidden": 64, "decoder_hidden": 64,
               "kl_weight": 1e-3, "epochs": 1000, "batch_size": 64},
    "ablation": {"classes": 4, "subjects": 40, "T": 50, "k": 8, "m": 3,
                 "stages": list(dp.STAGES), "loss_modes": list(rvae.LOSS_MODES),
                 "kl_grid": [2.0 ** -5, 2.0 ** -3, 2.0 ** -1]},
    "output_dir": None,
    "seed": 0,
}


# ------------------------------------------------------------------ config


def _merge(base, override, prefix=""):
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}", key=path)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object", key=path)
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_override(text):
    if "=" not in text:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}", key=text)
    key, value = text.split("=", 1)
    doc = {}
    node = doc
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(value)
    return doc


def resolve_config(path=None, sets=(), seed=None, out=None):
    """Defaults <- file <- ``--set`` overrides <- ``--seed``/``--out``; profile values fill unset keys."""
    cfg = copy.deepcopy(DEFAULTS)
    explicit = {"model": set(), "training": set()}

    def apply(doc):
        _merge(cfg, doc)
        for section in explicit:
            for key, value in doc.get(section, {}).items():
                if value is not None:
                    explicit[section].add(key)

    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path!r}: {exc.strerror}", key=None) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}", key=None) from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object", key=None)
        apply(doc)
    for s in sets:
        apply(_set_override(s))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = out
    profile = cfg["model"]["profile"]
    if profile not in PROFILES:
        raise ConfigError(f"unknown model profile {profile!r}", key="model.profile")
    for section, keys in _PROFILE_KEYS.items():
        for key in keys:
            if key not in explicit[section]:
                cfg[section][key] = PROFILES[profile][key]
    return cfg


def _checked(fn, key):
    try:
        return fn()
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"invalid value in section {key!r}: {exc}", key=key) from None


def registration_config(cfg):
    r = cfg["registration"]
    return _checked(lambda: reg.RegistrationConfig(
        max_iterations=int(r["max_iterations"]), step_size=float(r["step_size"]),
        tolerance=float(r["tolerance"]), init=r["init"]), "registration")


def training_config(cfg, seed_name="init"):
    m, t = cfg["model"], cfg["training"]
    rng_seed = int(ev.substream(cfg["seed"], seed_name).integers(0, 2 ** 31))
    return _checked(lambda: rvae.TrainingConfig(
        latent_dim=int(m["latent_dim"]), hidden=int(m["hidden"]),
        decoder_hidden=int(m["decoder_hidden"]), kl_weight=float(t["kl_weight"]),
        learning_rate=float(t["learning_rate"]), epochs=int(t["epochs"]),
        batch_size=None if t["batch_size"] is None else int(t["batch_size"]),
        dropout_rate=float(t["dropout_rate"]), rng_seed=rng_seed, loss_mode=m["loss_mode"],
    ), "training")


def pipeline_config(cfg):
    stage = cfg["alignment"]["stage"]
    if stage not in dp.STAGES:
        raise ConfigError(f"unknown alignment stage {stage!r}", key="alignment.stage")
    task = cfg["data"]["task"]
    if task not in ("classification", "regression"):
        raise ConfigError(f"unknown task {task!r}", key="data.task")
    return pl.PipelineConfig(stage=stage, T=int(cfg["data"]["T"]),
                             registration=registration_config(cfg),
                             training=training_config(cfg), k=int(cfg["eval"]["k"]), task=task)


# ----------------------------------------------------------------- helpers


class MissingArtifactError(ESVAEError):
    pass


def _load_data(cfg):
    path = cfg["data"]["path"]
    if not path:
        raise MissingArtifactError("no input data: set data.path")
    if not os.path.exists(path):
        raise MissingArtifactError(f"input data not found: {path}")
    return dp.load_sequences(path, cfg["data"]["format"])


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _versions():
    return {"esvae": __version__, "numpy": np.__version__, "numba": numba.__version__,
            "python": platform.python_version()}


def _seeds(cfg, names):
    root = cfg["seed"]
    return {"root": root, **{n: int(ev.substream(root, n).integers(0, 2 ** 31)) for n in names}}


def _stage_target(samples, task):
    if task == "classification":
        if any(s.label is None for s in samples):
            raise InvalidInputError("classification needs a label on every sequence")
    elif any(s.target is None for s in samples):
        raise InvalidInputError("regression needs a target on every sequence")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, out, jobs):
    syn = cfg["data"]["synthetic"]
    nuisance = dp.Nuisance(**syn["nuisance"])
    seed = int(ev.substream(cfg["seed"], "data").integers(0, 2 ** 31))
    samples = dp.generate_labeled_trajectories(
        int(syn["classes"]), int(syn["per_class"]), nuisance, seed=seed,
        k=int(syn["k"]), m=int(syn["m"]), T=int(syn["T"]), max_severity=float(syn["max_severity"]),
    )
    fmt = syn["format"]
    path = os.path.join(out, f"sequences.{fmt}")
    dp.save_sequences(path, samples, fmt)
    dp.write_manifest(os.path.join(out, "data_manifest.json"), syn, seed, path)
    return ["data"]


def cmd_register(cfg, out, jobs):
    samples = _load_data(cfg)
    T = int(cfg["data"]["T"])
    X = np.stack([dp.normalize_stage(s, "preshape", T) for s in samples])
    rcfg = registration_config(cfg)
    stage = cfg["alignment"]["stage"]
    rcfg = replace(rcfg, dp_enabled=(stage != "kendall"))
    result = reg.register_collection(X, rcfg, jobs=jobs)
    art.write_npz(os.path.join(out, "registration.npz"), {
        "mean": result.mean, "aligned": result.aligned, "shooting": result.shooting,
        "warps": result.warps, "rotations": result.rotations, "reference": result.reference,
        "subject_ids": np.array([s.subject_id for s in samples]),
    })
    _write_csv(os.path.join(out, "warps.csv"), ["subject_id", "t", "gamma"],
               [(s.subject_id, repr(float(t)), g)
                for s, w in zip(samples, result.warps) for t, g in zip(tr.grid(T), w)])
    with open(os.path.join(out, "convergence.log"), "w") as fh:
        fh.write(result.convergence_log())
    _write_json(os.path.join(out, "registration.json"), {
        "converged": result.converged, "iterations": result.iterations,
        "final_objective": result.objective_history[-1],
        "final_vbar_norm": result.mean_update_norms[-1],
    })
    return []


def cmd_train(cfg, out, jobs):
    samples = _load_data(cfg)
    pcfg = pipeline_config(cfg)
    model = pl.fit_model(samples, pcfg, jobs=jobs)
    state = model.state
    state.extra = {"stage": pcfg.stage, "T": pcfg.T}
    rvae.save_model(os.path.join(out, "model.npz"), state)
    _write_csv(os.path.join(out, "training_history.csv"),
               ["epoch", "reconstruction", "kl", "total"],
               [(i, h.reconstruction, h.kl, h.total) for i, h in enumerate(model.history)])
    if model.registration is not None:
        with open(os.path.join(out, "convergence.log"), "w") as fh:
            fh.write(model.registration.convergence_log())
    return ["init"]


def _load_fitted(cfg):
    path = cfg["model"]["path"]
    if not path:
        raise MissingArtifactError("no model archive: set model.path")
    if not os.path.exists(path):
        raise MissingArtifactError(f"model archive not found: {path}")
    state = rvae.load_model(path)
    stage, T = state.extra.get("stage"), state.extra.get("T")
    if stage is None or T is None:
        raise MissingArtifactError("model archive lacks the preprocessing stage and T")
    context = None
    if stage in dp.MANIFOLD_STAGES:
        context = dp.FoldContext(state.mean_traj, state.reference, stage == "kendall_tsrvf")
    return pl.FittedModel(state, stage, int(T), context, np.empty((0, state.params.dims[3])))


def cmd_embed(cfg, out, jobs):
    model = _load_fitted(cfg)
    samples = _load_data(cfg)
    codes = model.embed(samples)
    L = codes.shape[1]
    _write_csv(os.path.join(out, "embeddings.csv"),
               ["subject_id"] + [f"z{j + 1}" for j in range(L)],
               [[s.subject_id] + [float(v) for v in c] for s, c in zip(samples, codes)])
    return []


def _fold_plan(cfg, subjects):
    e = cfg["eval"]
    if e["protocol"] == "l5so":
        return ev.l5so_plan(subjects, int(e["group"]))
    if e["protocol"] == "kfold":
        return ev.kfold_plan(subjects, min(int(e["n_folds"]), len(subjects)))
    raise ConfigError(f"unknown eval protocol {e['protocol']!r}", key="eval.protocol")


def _metrics_rows(res):
    return [(name, ci.point, ci.lo, ci.hi) for name, ci in res.cis.items()]


def cmd_eval(cfg, out, jobs):
    samples = _load_data(cfg)
    pcfg = pipeline_config(cfg)
    _stage_target(samples, pcfg.task)
    subjects = sorted({s.subject_id for s in samples})
    plan = _fold_plan(cfg, subjects)
    res = pl.cross_validate(samples, plan, pcfg, seed=cfg["seed"],
                            replicates=int(cfg["eval"]["replicates"]), jobs=jobs)
    with open(os.path.join(out, "predictions.csv"), "w", newline="") as fh:
        fh.write(res.predictions_csv())
    _write_json(os.path.join(out, "metrics.json"),
                {**res.summary(), "task": pcfg.task, "stage": pcfg.stage,
                 "folds": len(plan), "seed": cfg["seed"]})
    _write_csv(os.path.join(out, "metrics.csv"), ["metric", "value", "ci_lo", "ci_hi"],
               _metrics_rows(res))
    return ["init", "bootstrap"]


def cmd_sphere_demo(cfg, out, jobs):
    s = cfg["sphere"]
    seed = cfg["seed"]
    spec = _checked(lambda: dp.SphereDatasetSpec(
        n_points=int(s["n_points"]), noise_level=float(s["noise_level"]),
        seed=int(ev.substream(seed, "data").integers(0, 2 ** 31)), curve=s["curve"],
        amplitude=float(s["amplitude"]), span=float(s["span"])), "sphere")
    training = _checked(lambda: replace(
        pl.SPHERE_TRAINING, latent_dim=int(s["latent_dim"]), hidden=int(s["hidden"]),
        decoder_hidden=int(s["decoder_hidden"]), kl_weight=float(s["kl_weight"]),
        epochs=int(s["epochs"]),
        batch_size=None if s["batch_size"] is None else int(s["batch_size"])), "sphere")
    rows, recon, ds = pl.sphere_demo(spec, training, seed=seed)
    _write_csv(os.path.join(out, "sphere_comparison.csv"),
               ["method", "mean_geodesic_error", "median_geodesic_error"],
               [(r["method"], r["mean_geodesic_error"], r["median_geodesic_error"]) for r in rows])
    plot_rows = [("data", i, *map(float, p)) for i, p in enumerate(ds.points)]
    curve = dp.sphere_curve(spec, np.linspace(0.0, 1.0, 501))
    plot_rows += [("true_curve", i, *map(float, p)) for i, p in enumerate(curve)]
    for method, pts in recon.items():
        plot_rows += [(method, i, *map(float, p)) for i, p in enumerate(pts)]
    _write_csv(os.path.join(out, "sphere_points.csv"), ["series", "index", "x", "y", "z"],
               plot_rows)
    return ["data", "init"]


def cmd_ablation(cfg, out, jobs):
    a = cfg["ablation"]
    acfg = _checked(lambda: pl.AblationConfig(
        classes=int(a["classes"]), subjects=int(a["subjects"]), T=int(a["T"]),
        k_landmarks=int(a["k"]), m=int(a["m"]), stages=tuple(a["stages"]),
        loss_modes=tuple(a["loss_modes"]), kl_grid=tuple(float(x) for x in a["kl_grid"]),
        replicates=int(cfg["eval"]["replicates"])), "ablation")
    bad = [s for s in acfg.stages if s not in dp.STAGES]
    if bad:
        raise ConfigError(f"unknown alignment stage {bad[0]!r}", key="ablation.stages")
    samples = None
    if cfg["data"]["path"]:
        samples = _load_data(cfg)
    else:
        seed = int(ev.substream(cfg["seed"], "data").integers(0, 2 ** 31))
        samples = dp.generate_labeled_trajectories(acfg.classes, acfg.subjects, dp.Nuisance(),
                                                   seed=seed, k=acfg.k_landmarks, m=acfg.m,
                                                   T=acfg.T)
    pcfg = pipeline_config(cfg)
    rows, sweep = pl.ablation(acfg, pcfg, seed=cfg["seed"], jobs=jobs, samples=samples)
    _write_csv(os.path.join(out, "ablation.csv"),
               ["stage", "loss_mode", "metric", "value", "ci_lo", "ci_hi"],
               [(r["stage"], r["loss_mode"], r["metric"], r["value"], r["ci_lo"], r["ci_hi"])
                for r in rows])
    _write_csv(os.path.join(out, "kl_sweep.csv"),
               ["kl_weight", "metric", "value", "ci_lo", "ci_hi"],
               [(r["kl_weight"], r["metric"], r["value"], r["ci_lo"], r["ci_hi"]) for r in sweep])
    return ["data", "init", "bootstrap"]


COMMANDS = {
    "register": cmd_register,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "sphere-demo": cmd_sphere_demo,
    "ablation": cmd_ablation,
    "gen-data": cmd_gen_data,
}


# -------------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(prog="esvae", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", metavar="PATH", help="JSON run configuration")
    parser.add_argument("--set", dest="sets", metavar="K=V", action="append", default=[],
                        help="override a config value, e.g. training.epochs=10 (repeatable)")
    parser.add_argument("--jobs", type=int, default=1, metavar="N", help="worker threads")
    parser.add_argument("--seed", type=int, default=None, metavar="S", help="root seed")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error(kind, message, status, **extra):
    doc = {"error": kind, "message": message, **extra}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return status


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.sets, args.seed, args.out)
        out = cfg["output_dir"]
        if not out:
            raise ConfigError("no output directory: pass --out", key="output_dir")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1", key="jobs")
        with art.atomic_dir(out) as tmp:
            seed_names = COMMANDS[args.command](cfg, tmp, args.jobs)
            _write_json(os.path.join(tmp, "config.json"), cfg)
            hashes = art.tree_hashes(tmp)
            _write_json(os.path.join(tmp, "manifest.json"), {
                "command": args.command,
                "config": cfg,
                "seeds": _seeds(cfg, seed_names),
                "versions": _versions(),
                "content_hashes": hashes,
                "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            })
    except ConfigError as exc:
        return _error("config", str(exc), 2, key=exc.key)
    except MissingArtifactError as exc:
        return _error("missing_artifact", str(exc), 3)
    except ESVAEError as exc:
        extra = {k: getattr(exc, k) for k in ("frame", "trajectory", "batch_index")
                 if getattr(exc, k, None) is not None}
        return _error(type(exc).__name__, str(exc), 1, **extra)
    except (ValueError, OSError) as exc:
        return _error(type(exc).__name__, str(exc), 1)
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
