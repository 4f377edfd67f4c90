"""End-to-end fold pipeline, the sphere comparison, and the alignment ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dp
from . import evaluation as ev
from . import geometry as geo
from . import pca as pca_mod
from . import registration as reg
from . import rvae

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    stage: str = "kendall_tsrvf"
    T: int = 50
    registration: reg.RegistrationConfig = field(default_factory=reg.RegistrationConfig)
    training: rvae.TrainingConfig = field(default_factory=rvae.TrainingConfig)
    k: int = 5
    task: str = "classification"


@dataclass
class FittedModel:
    """A trained model plus the fold context needed to embed new sequences."""

    state: rvae.ModelState
    stage: str
    T: int
    context: dp.FoldContext | None
    train_codes: np.ndarray
    registration: reg.RegistrationResult | None = None
    history: list = field(default_factory=list)

    def features(self, sequences):
        return np.stack([dp.preprocess(s, self.stage, self.T, self.context).reshape(-1)
                         for s in sequences])

    def embed(self, sequences):
        """Variance-ordered posterior means for new sequences."""
        return self.state.embed(self.features(sequences))


def fit_model(train, cfg, jobs=1, reg_cache=None):
    """Preprocess, register (manifold stages), standardise and train on ``train`` only.

    ``reg_cache`` (a dict) lets runs that differ only in training settings
    share the registration of identical training sets.
    """
    X = np.stack([dp.normalize_stage(s, cfg.stage, cfg.T) for s in train])
    context = None
    result = None
    if cfg.stage in dp.MANIFOLD_STAGES:
        rcfg = replace(cfg.registration, dp_enabled=(cfg.stage == "kendall_tsrvf"))
        key = (rcfg, X.tobytes())
        if reg_cache is not None and key in reg_cache:
            result = reg_cache[key]
        else:
            result = reg.register_collection(X, rcfg, jobs=jobs)
            if reg_cache is not None:
                reg_cache[key] = result
        context = dp.FoldContext(result.mean, result.reference, rcfg.dp_enabled)
        fields = result.shooting.reshape(len(train), -1)
        kind, mean_traj, reference = "kendall", result.mean, result.reference
    else:
        fields = X.reshape(len(train), -1)
        kind, mean_traj, reference = "euclidean", None, None
    std = rvae.Standardizer.fit(fields)
    head = rvae.OutputHead(kind, mean_traj, cfg.training.loss_mode, std.mean, std.std)
    targets = result.aligned if head.geodesic else fields
    V = std.transform(fields)
    params, history = rvae.train(V, targets, head, cfg.training)
    codes = rvae.encode(params, V).posterior_mean
    perm = np.arange(codes.shape[1])
    if len(codes) >= 2:
        perm, params, codes = rvae.reorder_latents(params, codes)
    # params are stored already reordered; the permutation is kept for the record
    state = rvae.ModelState(params, cfg.training, head.kind, mean_traj, reference, perm, std)
    return FittedModel(state, cfg.stage, cfg.T, context, codes, result, history)


def make_fit_predict(cfg, jobs=1, seed=0, artifacts=None, reg_cache=None):
    """Fold callback for :func:`~esvae.evaluation.run_cross_validation`.

    Each fold trains with its own seed derived from ``(seed, fold)``. If
    ``artifacts`` is a dict, fitted models are stored in it by fold index.
    """
    def fit_predict(f, train, val, test):
        fold_seed = int(ev.substream(seed, "init", f).integers(0, 2 ** 31))
        fcfg = replace(cfg, training=replace(cfg.training, rng_seed=fold_seed))
        model = fit_model(train, fcfg, jobs=jobs, reg_cache=reg_cache)
        if artifacts is not None:
            artifacts[f] = model
        ys = [s.label if cfg.task == "classification" else s.target for s in train]
        test_codes = model.embed(test)
        classes = sorted(set(ys)) if cfg.task == "classification" else None
        return ev.knn_predict(model.train_codes, ys, test_codes, cfg.k, cfg.task, classes)

    return fit_predict


def cross_validate(samples, plan, cfg, seed=0, replicates=2000, jobs=1, artifacts=None,
                   reg_cache=None):
    classes = sorted({s.label for s in samples}) if cfg.task == "classification" else None
    fit_predict = make_fit_predict(cfg, jobs=jobs, seed=seed, artifacts=artifacts,
                                   reg_cache=reg_cache)
    return ev.run_cross_validation(
        samples, plan, fit_predict,
        task=cfg.task, classes=classes, replicates=replicates, seed=seed,
    )


# ------------------------------------------------------------- sphere demo


SPHERE_TRAINING = rvae.TrainingConfig(latent_dim=1, hidden=64, decoder_hidden=64,
                                      kl_weight=1e-3, epochs=1000, batch_size=64)


def sphere_frechet_mean(points, iterations=100, tol=1e-14):
    """Karcher mean of unit vectors, shape ``(n, 3)``."""
    x = np.asarray(points, dtype=float)[:, None, :]
    mu = x[0]
    for _ in range(iterations):
        v = geo.log_map(mu, x).mean(axis=0)
        if geo.norm(v) < tol:
            break
        mu = geo.exp_map(mu, v)
    return mu[0]


def _normalize_rows(p):
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sphere_demo(spec=dp.SphereDatasetSpec(), training=SPHERE_TRAINING, seed=0):
    """Fit four one-dimensional models to the sphere dataset.

    Returns ``(rows, reconstructions)``: per-method mean and median geodesic
    distance of the reconstructions to the true curve, and the reconstructed
    points ``(n, 3)`` by method. Euclidean reconstructions are radially
    projected onto the sphere before measuring.
    """
    ds = dp.generate_sphere_dataset(spec)
    X = ds.points
    n = len(X)
    mu = sphere_frechet_mean(X)
    base = mu[None, None, :]
    V = geo.log_map(base, X[:, None, :]).reshape(n, 3)
    tcfg = replace(training, rng_seed=int(ev.substream(seed, "init").integers(0, 2 ** 31)))
    recon = {}

    ep = pca_mod.euclidean_pca(X, 1)
    recon["euclidean_pca"] = _normalize_rows(ep.denoise(X))

    sE = rvae.Standardizer.fit(X)
    hE = rvae.OutputHead("euclidean", out_mean=sE.mean, out_scale=sE.std)
    pE, _ = rvae.train(sE.transform(X), X, hE, tcfg)
    zE = rvae.encode(pE, sE.transform(X)).posterior_mean
    recon["euclidean_vae"] = _normalize_rows(rvae.reconstruct(pE, zE, hE))

    tp = pca_mod.tangent_pca(V, 1)
    recon["tangent_pca"] = geo.exp_map(base, tp.denoise(V).reshape(n, 1, 3)).reshape(n, 3)

    sS = rvae.Standardizer.fit(V)
    hS = rvae.OutputHead("sphere", base, "geodesic", sS.mean, sS.std)
    pS, _ = rvae.train(sS.transform(V), X[:, None, None, :], hS, tcfg)
    zS = rvae.encode(pS, sS.transform(V)).posterior_mean
    recon["es_vae"] = rvae.reconstruct(pS, zS, hS).reshape(n, 3)

    rows = []
    for method, pts in recon.items():
        d = dp.distance_to_curve(spec, pts)
        rows.append({"method": method, "mean_geodesic_error": float(d.mean()),
                     "median_geodesic_error": float(np.median(d))})
    return rows, recon, ds


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationConfig:
    classes: int = 4
    subjects: int = 40
    T: int = 50
    k_landmarks: int = 8
    m: int = 3
    stages: tuple = dp.STAGES
    loss_modes: tuple = rvae.LOSS_MODES
    kl_grid: tuple = (2.0 ** -5, 2.0 ** -3, 2.0 ** -1)
    replicates: int = 2000


def ablation(acfg, pipeline, seed=0, jobs=1, samples=None):
    """Run the stage x loss-mode matrix and a KL-weight sweep.

    Manifold stages are run once per loss mode; Euclidean stages have a
    single row with loss mode ``"euclidean"``. The KL sweep uses the
    strongest stage with the geodesic loss.

    Returns ``(stage_rows, sweep_rows)``.
    """
    if samples is None:
        samples = dp.generate_labeled_trajectories(
            acfg.classes, acfg.subjects, dp.Nuisance(), seed=seed,
            k=acfg.k_landmarks, m=acfg.m, T=acfg.T,
        )
    subjects = sorted({s.subject_id for s in samples})
    plan = ev.l5so_plan(subjects)
    cache = {}
    reg_cache = {}
    rows = []

    def run(stage, mode, kl=None):
        training = replace(pipeline.training, loss_mode=mode if mode != "euclidean" else "geodesic")
        if kl is not None:
            training = replace(training, kl_weight=kl)
        cfg = replace(pipeline, stage=stage, T=acfg.T, training=training, task="classification")
        key = (stage, mode, training.kl_weight)
        if key not in cache:
            log.info("ablation: stage=%s loss=%s kl=%g", stage, mode, training.kl_weight)
            cache[key] = cross_validate(samples, plan, cfg, seed=seed,
                                        replicates=acfg.replicates, jobs=jobs,
                                        reg_cache=reg_cache)
        return cache[key]

    for stage in acfg.stages:
        modes = acfg.loss_modes if stage in dp.MANIFOLD_STAGES else ("euclidean",)
        for mode in modes:
            res = run(stage, mode)
            for metric in ("macro_f1", "macro_precision", "macro_recall", "accuracy"):
                ci = res.cis[metric]
                rows.append({"stage": stage, "loss_mode": mode, "metric": metric,
                             "value": ci.point, "ci_lo": ci.lo, "ci_hi": ci.hi})
    sweep = []
    for kl in acfg.kl_grid:
        res = run("kendall_tsrvf", "geodesic", kl)
        ci = res.cis["macro_f1"]
        sweep.append({"kl_weight": kl, "metric": "macro_f1", "value": ci.point,
                      "ci_lo": ci.lo, "ci_hi": ci.hi})
    return rows, sweep
