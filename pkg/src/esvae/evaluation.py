"""k-NN prediction in latent space, metrics, subject-level bootstrap, fold plans."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import EmptyFoldError, InvalidInputError, UndefinedMetricError, UnstableCIError

EXACT_MATCH = 1e-12


def substream(seed, name, *indices):
    """Independent generator for a named component of a run."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, indices)])


# ---------------------------------------------------------------- k-NN


def _neighbors(train_codes, query, k):
    train_codes = np.asarray(train_codes, dtype=float)
    if train_codes.ndim != 2 or train_codes.shape[0] == 0:
        raise InvalidInputError("empty training set")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    d = np.linalg.norm(train_codes - np.asarray(query, dtype=float), axis=1)
    idx = np.argsort(d, kind="stable")[: min(k, len(d))]
    return idx, d[idx]


def knn_regress(train_codes, train_targets, query, k=5):
    """Inverse-distance weighted mean of the ``k`` nearest training targets."""
    idx, d = _neighbors(train_codes, query, k)
    y = np.asarray(train_targets, dtype=float)[idx]
    if d[0] < EXACT_MATCH or len(y) == 1:
        return float(y[0])
    w = 1.0 / d
    return float(np.sum(w * y) / np.sum(w))


def knn_classify(train_codes, train_labels, query, k=5, classes=None):
    """Class with the largest inverse-distance weight among the ``k`` nearest.

    Ties go to the class appearing first in ``classes`` (default: sorted labels).
    """
    idx, d = _neighbors(train_codes, query, k)
    labels = np.asarray(train_labels)
    if classes is None:
        classes = sorted(set(labels.tolist()))
    if d[0] < EXACT_MATCH:
        return labels[idx[0]].item()
    w = 1.0 / d
    scores = np.array([np.sum(w[labels[idx] == c]) for c in classes])
    return classes[int(np.argmax(scores))]


def knn_predict(train_codes, train_targets, query_codes, k=5, task="regression", classes=None):
    if task == "regression":
        return np.array([knn_regress(train_codes, train_targets, q, k) for q in query_codes])
    return np.array([knn_classify(train_codes, train_targets, q, k, classes) for q in query_codes])


# ------------------------------------------------------------- metrics


def regression_metrics(y_true, y_pred):
    """``{"rmse", "r2", "pearson_r"}``."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise InvalidInputError("y_true and y_pred must have equal nonzero length")
    resid = y_true - y_pred
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    dt = y_true - y_true.mean()
    ss_tot = float(np.sum(dt ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R^2 and Pearson r are undefined for constant y_true")
    dp = y_pred - y_pred.mean()
    sp = float(np.sum(dp ** 2))
    if sp == 0.0:
        raise UndefinedMetricError("Pearson r is undefined for constant predictions")
    return {
        "rmse": rmse,
        "r2": 1.0 - float(np.sum(resid ** 2)) / ss_tot,
        "pearson_r": float(np.clip(np.sum(dt * dp) / np.sqrt(ss_tot * sp), -1.0, 1.0)),
    }


def _ratio(a, b):
    return a / b if b > 0 else 0.0


def confusion_matrix(y_true, y_pred, classes):
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        if t not in pos or p not in pos:
            raise InvalidInputError(f"label outside the class list: {t!r} / {p!r}")
        cm[pos[t], pos[p]] += 1
    return cm


def classification_metrics(y_true, y_pred, classes=None):
    """Per-class and averaged precision, recall and F1 (0 for 0/0), plus accuracy."""
    y_true = list(np.asarray(y_true).tolist())
    y_pred = list(np.asarray(y_pred).tolist())
    if len(y_true) != len(y_pred) or not y_true:
        raise InvalidInputError("y_true and y_pred must have equal nonzero length")
    if classes is None:
        classes = sorted(set(y_true) | set(y_pred))
    cm = confusion_matrix(y_true, y_pred, classes)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    per_class = {}
    prec, rec, f1 = [], [], []
    for i, c in enumerate(classes):
        tp = cm[i, i]
        p = _ratio(tp, predicted[i])
        r = _ratio(tp, support[i])
        f = _ratio(2 * p * r, p + r)
        prec.append(p)
        rec.append(r)
        f1.append(f)
        per_class[str(c)] = {"precision": p, "recall": r, "f1": f, "support": int(support[i])}
    weights = support / support.sum()
    return {
        "accuracy": float(np.trace(cm) / cm.sum()),
        "macro_precision": float(np.mean(prec)),
        "macro_recall": float(np.mean(rec)),
        "macro_f1": float(np.mean(f1)),
        "weighted_precision": float(np.dot(weights, prec)),
        "weighted_recall": float(np.dot(weights, rec)),
        "weighted_f1": float(np.dot(weights, f1)),
        "per_class": per_class,
        "confusion": cm.tolist(),
    }


# ----------------------------------------------------------- bootstrap


@dataclass
class CI:
    point: float
    lo: float
    hi: float
    replicates: int
    skipped: int

    def as_dict(self):
        return {"point": self.point, "ci_lo": self.lo, "ci_hi": self.hi,
                "replicates": self.replicates, "skipped": self.skipped}


def bootstrap_ci(subjects, y_true, y_pred, metric, replicates=2000, seed=0, level=0.95):
    """Subject-level percentile bootstrap.

    Subjects are resampled with replacement and all their samples pooled.
    Replicates on which ``metric`` raises :class:`UndefinedMetricError` are
    skipped; more than half skipped raises :class:`UnstableCIError`.

    Args:
        subjects: Subject id per sample.
        y_true, y_pred: Per-sample truth and prediction.
        metric: ``metric(y_true, y_pred) -> float``.
        replicates: Number of bootstrap replicates.
        seed: Seed of the resampling stream.
    """
    subjects = np.asarray(subjects)
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    ids, inverse = np.unique(subjects, return_inverse=True)
    if len(ids) < 2:
        raise InvalidInputError("bootstrap needs at least 2 subjects")
    if replicates < 1:
        raise InvalidInputError("replicates must be >= 1")
    members = [np.flatnonzero(inverse == s) for s in range(len(ids))]
    point = float(metric(y_true, y_pred))
    rng = np.random.default_rng(seed)
    values = []
    skipped = 0
    for _ in range(replicates):
        pick = rng.integers(0, len(ids), size=len(ids))
        idx = np.concatenate([members[s] for s in pick])
        try:
            values.append(float(metric(y_true[idx], y_pred[idx])))
        except UndefinedMetricError:
            skipped += 1
    if skipped * 2 > replicates:
        raise UnstableCIError(f"{skipped} of {replicates} bootstrap replicates undefined")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)], method="linear")
    return CI(point, float(lo), float(hi), replicates, skipped)


# ----------------------------------------------------------- fold plans


@dataclass(frozen=True)
class Fold:
    train: tuple
    val: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple

    def __post_init__(self):
        for i, f in enumerate(self.folds):
            a, b, c = set(f.train), set(f.val), set(f.test)
            if a & b or a & c or b & c:
                raise InvalidInputError(f"fold {i}: train/val/test subject sets overlap")

    def __len__(self):
        return len(self.folds)

    def as_dict(self):
        return [{"train": list(f.train), "val": list(f.val), "test": list(f.test)}
                for f in self.folds]


def l5so_plan(subjects, group=5):
    """Leave-``group``-subjects-out: block ``b`` is the test set, block ``b + 1`` validation."""
    subjects = list(subjects)
    if len(subjects) < 3 * group or len(subjects) % group:
        raise InvalidInputError(
            f"leave-{group}-out needs a multiple of {group} subjects and at least three blocks"
        )
    blocks = [tuple(subjects[i:i + group]) for i in range(0, len(subjects), group)]
    folds = []
    for b in range(len(blocks)):
        v = (b + 1) % len(blocks)
        train = tuple(s for i, blk in enumerate(blocks) if i not in (b, v) for s in blk)
        folds.append(Fold(train, blocks[v], blocks[b]))
    return FoldPlan(tuple(folds))


def kfold_plan(subjects, n_folds=30):
    """Each subject is a test subject exactly once; folds are contiguous, near-equal blocks.

    The validation set of fold ``f`` is the test set of fold ``f + 1``.
    """
    subjects = list(subjects)
    if not 3 <= n_folds <= len(subjects):
        raise InvalidInputError("n_folds must lie in [3, number of subjects]")
    blocks = [tuple(b.tolist()) for b in np.array_split(np.array(subjects, dtype=object), n_folds)]
    folds = []
    for b in range(n_folds):
        v = (b + 1) % n_folds
        train = tuple(s for i, blk in enumerate(blocks) if i not in (b, v) for s in blk)
        folds.append(Fold(train, blocks[v], blocks[b]))
    return FoldPlan(tuple(folds))


def stroke_plan(subjects):
    """The 30-fold subject-wise layout used for the regression task."""
    return kfold_plan(subjects, 30)


# -------------------------------------------------------- cross-validation


@dataclass
class CVResult:
    subject_ids: list
    folds: list
    y_true: list
    y_pred: list
    metrics: dict
    cis: dict

    def predictions_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "fold", "y_true", "y_pred"])
        for row in zip(self.subject_ids, self.folds, self.y_true, self.y_pred):
            w.writerow([row[0], row[1], _fmt(row[2]), _fmt(row[3])])
        return buf.getvalue()

    def summary(self):
        return {"metrics": self.metrics, "ci": {k: v.as_dict() for k, v in self.cis.items()},
                "n_predictions": len(self.y_true)}


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def run_cross_validation(samples, plan, fit_predict, task="classification", classes=None,
                         replicates=2000, seed=0, jobs=1):
    """Pool out-of-fold test predictions and score them.

    Args:
        samples: Sequence of objects with ``subject_id`` and ``target`` /
            ``label`` attributes (the :class:`~esvae.data.RawSequence` type).
        plan: FoldPlan over subject ids.
        fit_predict: ``fit_predict(fold_index, train, val, test) -> predictions``
            for the test samples, in order. Only ``train`` may be used for
            fitting.
        task: ``"classification"`` (labels) or ``"regression"`` (targets).
        replicates: Bootstrap replicates for every metric.
        seed: Root seed; the bootstrap uses a named substream.
        jobs: Folds run concurrently in threads when > 1.

    Returns:
        CVResult with predictions ordered by fold, then by sample order.
    """
    def truth(s):
        return s.label if task == "classification" else s.target

    work = []
    for f, fold in enumerate(plan.folds):
        te = set(fold.test)
        test = [s for s in samples if s.subject_id in te]
        if not test:
            raise EmptyFoldError(f"fold {f} has an empty test set")
        tr_ = set(fold.train)
        va = set(fold.val)
        train = [s for s in samples if s.subject_id in tr_]
        val = [s for s in samples if s.subject_id in va]
        if not train:
            raise EmptyFoldError(f"fold {f} has an empty training set")
        work.append((f, train, val, test))

    def run(item):
        f, train, val, test = item
        return np.asarray(fit_predict(f, train, val, test)).tolist()

    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            preds = list(pool.map(run, work))
    else:
        preds = [run(w) for w in work]

    subject_ids, fold_ids, y_true, y_pred = [], [], [], []
    for (f, _, _, test), p in zip(work, preds):
        for s, yp in zip(test, p):
            subject_ids.append(s.subject_id)
            fold_ids.append(f)
            y_true.append(truth(s))
            y_pred.append(yp)
    rng_seed = int(substream(seed, "bootstrap").integers(0, 2 ** 63))
    if task == "classification":
        cls = classes if classes is not None else sorted(set(y_true) | set(y_pred))
        metrics = classification_metrics(y_true, y_pred, cls)
        keys = ("macro_f1", "macro_precision", "macro_recall", "accuracy")
        cis = {k: bootstrap_ci(subject_ids, y_true, y_pred,
                               lambda a, b, k=k: classification_metrics(a, b, cls)[k],
                               replicates, rng_seed) for k in keys}
    else:
        metrics = regression_metrics(y_true, y_pred)
        cis = {k: bootstrap_ci(subject_ids, y_true, y_pred,
                               lambda a, b, k=k: regression_metrics(a, b)[k],
                               replicates, rng_seed) for k in metrics}
    return CVResult(subject_ids, fold_ids, y_true, y_pred, metrics, cis)
