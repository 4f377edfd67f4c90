"""Sequence ingest, synthetic generators, and alignment-stage preprocessing.

File formats
------------
CSV: header ``subject,frame,joint,x,y[,z]`` with optional ``target`` and
``label`` columns (constant within a subject) and an optional ``sequence``
column for subjects with several sequences. Rows may come in any order.

JSON: a list of objects with ``subject_id``, ``frames`` (``T x k x m``
nested arrays), and optional ``target``, ``label`` and ``meta``.

Floats are written with ``repr``, the shortest decimal string that parses
back to the same double (at most 17 significant digits).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from . import registration as reg
from . import trajectory as tr
from .errors import DataFormatError, InvalidInputError, RaggedDataError

STAGES = ("none", "center", "preshape", "kendall", "kendall_tsrvf")
MANIFOLD_STAGES = ("kendall", "kendall_tsrvf")


@dataclass
class RawSequence:
    frames: np.ndarray
    subject_id: str
    target: float | None = None
    label: str | int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise InvalidInputError(
                f"sequence {self.subject_id!r}: frames must be (T, k, m) with T >= 2"
            )
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInputError(f"sequence {self.subject_id!r}: non-finite coordinates")
        if self.subject_id == "":
            raise InvalidInputError("empty subject_id")


def _num(x):
    return repr(float(x))


def _parse_float(text, where):
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataFormatError(f"{where}: non-finite value {text!r}")
    return value


def _parse_label(text):
    try:
        return int(text)
    except ValueError:
        return text


# ---------------------------------------------------------------- CSV / JSON


def save_sequences(path, sequences, fmt=None):
    fmt = fmt or _infer_format(path)
    if fmt == "json":
        text = _to_json(sequences)
    elif fmt == "csv":
        text = _to_csv(sequences)
    else:
        raise InvalidInputError(f"unknown format {fmt!r}")
    with open(path, "w", newline="") as fh:
        fh.write(text)


def load_sequences(path, fmt=None):
    fmt = fmt or _infer_format(path)
    with open(path, newline="") as fh:
        text = fh.read()
    if fmt == "json":
        return _from_json(text)
    if fmt == "csv":
        return _from_csv(text)
    raise InvalidInputError(f"unknown format {fmt!r}")


def _infer_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".json", ".csv"):
        return ext[1:]
    raise InvalidInputError(f"cannot infer format from {path!r}; pass fmt")


def _to_json(sequences):
    docs = []
    for s in sequences:
        doc = {"subject_id": s.subject_id, "frames": s.frames.tolist()}
        if s.target is not None:
            doc["target"] = float(s.target)
        if s.label is not None:
            doc["label"] = s.label
        if s.meta:
            doc["meta"] = s.meta
        docs.append(doc)
    return json.dumps(docs) + "\n"


def _from_json(text):
    try:
        docs = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc}") from None
    if isinstance(docs, dict):
        docs = [docs]
    out = []
    for i, doc in enumerate(docs):
        if "subject_id" not in doc or "frames" not in doc:
            raise DataFormatError(f"sequence {i}: missing subject_id or frames")
        try:
            frames = np.array(doc["frames"], dtype=float)
        except ValueError:
            raise RaggedDataError(f"sequence {i} ({doc['subject_id']}): ragged frames") from None
        if frames.ndim != 3:
            raise RaggedDataError(f"sequence {i} ({doc['subject_id']}): frames must be T x k x m")
        if not np.all(np.isfinite(frames)):
            raise DataFormatError(f"sequence {i} ({doc['subject_id']}): non-finite values")
        out.append(RawSequence(frames, str(doc["subject_id"]), doc.get("target"),
                               doc.get("label"), doc.get("meta", {})))
    return out


def _to_csv(sequences):
    m = {s.frames.shape[2] for s in sequences}
    if len(m) != 1:
        raise InvalidInputError("all sequences must share the coordinate dimension")
    m = m.pop()
    coords = ["x", "y", "z"][:m]
    counts = {}
    for s in sequences:
        counts[s.subject_id] = counts.get(s.subject_id, 0) + 1
    multi = any(c > 1 for c in counts.values())
    has_target = any(s.target is not None for s in sequences)
    has_label = any(s.label is not None for s in sequences)
    header = ["subject"] + (["sequence"] if multi else []) + ["frame", "joint"] + coords
    header += (["target"] if has_target else []) + (["label"] if has_label else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    seen = {}
    for s in sequences:
        seq = seen.get(s.subject_id, 0)
        seen[s.subject_id] = seq + 1
        for t, frame in enumerate(s.frames):
            for j, row in enumerate(frame):
                rec = [s.subject_id] + ([seq] if multi else []) + [t, j] + [_num(v) for v in row]
                if has_target:
                    rec.append("" if s.target is None else _num(s.target))
                if has_label:
                    rec.append("" if s.label is None else s.label)
                w.writerow(rec)
    return buf.getvalue()


def _from_csv(text):
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataFormatError("empty CSV file") from None
    required = ["subject", "frame", "joint", "x", "y"]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataFormatError(f"CSV header lacks columns {missing}")
    col = {name: i for i, name in enumerate(header)}
    coords = ["x", "y"] + (["z"] if "z" in col else [])
    groups = {}
    order = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        where = f"line {lineno}"
        subj = row[col["subject"]]
        seq = int(row[col["sequence"]]) if "sequence" in col else 0
        key = (subj, seq)
        if key not in groups:
            groups[key] = {"cells": {}, "target": None, "label": None}
            order.append(key)
        g = groups[key]
        t, j = int(row[col["frame"]]), int(row[col["joint"]])
        if (t, j) in g["cells"]:
            raise DataFormatError(f"{where}: duplicate entry for subject {subj}, frame {t}, joint {j}")
        g["cells"][(t, j)] = [_parse_float(row[col[c]], where) for c in coords]
        if "target" in col and row[col["target"]] != "":
            g["target"] = _parse_float(row[col["target"]], where)
        if "label" in col and row[col["label"]] != "":
            g["label"] = _parse_label(row[col["label"]])
    out = []
    for key in sorted(order, key=lambda k: (k[0], k[1])):
        subj = key[0]
        g = groups[key]
        frames_idx = sorted({t for t, _ in g["cells"]})
        joints_idx = sorted({j for _, j in g["cells"]})
        if frames_idx != list(range(len(frames_idx))):
            raise RaggedDataError(f"subject {subj}: frame indices are not contiguous from 0")
        k = len(joints_idx)
        if joints_idx != list(range(k)):
            raise RaggedDataError(f"subject {subj}: joint indices are not contiguous from 0")
        frames = np.empty((len(frames_idx), k, len(coords)))
        for t in frames_idx:
            for j in joints_idx:
                if (t, j) not in g["cells"]:
                    raise RaggedDataError(f"subject {subj}, frame {t}: missing joint {j}")
                frames[t, j] = g["cells"][(t, j)]
        out.append(RawSequence(frames, subj, g["target"], g["label"]))
    return out


def content_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, spec, seed, data_path):
    doc = {"spec": spec, "seed": seed, "file": os.path.basename(data_path),
           "sha256": content_hash(data_path)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------ sphere dataset


@dataclass(frozen=True)
class SphereDatasetSpec:
    """Noisy samples around a non-geodesic curve on the unit sphere.

    ``curve="arc"`` is an open wavy arc: longitude ``span * (s - 1/2)`` and
    colatitude ``pi/2 + amplitude * sin(2 pi s)``. ``curve="band"`` closes
    the same wave around the whole equator (longitude ``2 pi s``).
    """

    n_points: int = 500
    noise_level: float = 0.05
    seed: int = 0
    curve: str = "arc"
    amplitude: float = 0.6
    span: float = 2.0 * np.pi / 3.0

    def __post_init__(self):
        if self.n_points < 10:
            raise InvalidInputError("n_points must be >= 10")
        if self.noise_level < 0:
            raise InvalidInputError("noise_level must be >= 0")
        if self.curve not in ("arc", "band"):
            raise InvalidInputError(f"unknown curve {self.curve!r}")


def sphere_curve(spec, s):
    s = np.asarray(s, dtype=float)
    lam = spec.span * (s - 0.5) if spec.curve == "arc" else 2.0 * np.pi * s
    phi = np.pi / 2 + spec.amplitude * np.sin(2.0 * np.pi * s)
    return np.stack([np.sin(phi) * np.cos(lam), np.sin(phi) * np.sin(lam), np.cos(phi)], axis=-1)


@dataclass
class SphereDataset:
    points: np.ndarray
    params: np.ndarray
    curve_points: np.ndarray


def generate_sphere_dataset(spec):
    """Points ``Exp_{c(s_i)}(eta_i)`` with ``s_i`` uniform and isotropic tangent noise ``eta_i``."""
    rng = np.random.default_rng([spec.seed, 0x5EED])
    s = rng.uniform(0.0, 1.0, spec.n_points)
    c = sphere_curve(spec, s)
    eta = spec.noise_level * rng.standard_normal(c.shape)
    eta -= np.sum(eta * c, axis=1, keepdims=True) * c
    pts = geo.exp_map(c[:, None, :], eta[:, None, :])[:, 0, :]
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return SphereDataset(pts, s, c)


def distance_to_curve(spec, points, resolution=20001):
    """Geodesic distance of each point to a dense sampling of the true curve."""
    dense = sphere_curve(spec, np.linspace(0.0, 1.0, resolution))
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    out = np.empty(len(p))
    for start in range(0, len(p), 256):
        dots = p[start:start + 256] @ dense.T
        out[start:start + 256] = np.arccos(np.clip(dots.max(axis=1), -1.0, 1.0))
    return out


# ------------------------------------------------------ labeled trajectories


@dataclass(frozen=True)
class Nuisance:
    rotation: bool = True
    scale: bool = True
    translation: bool = True
    warp: bool = True


def _skeleton(k, m, rng):
    base = rng.standard_normal((k, m))
    return base - base.mean(axis=0)


def class_prototypes(classes, k=8, m=3, T=50, seed=0):
    """Smooth prototype motions: each landmark oscillates along a fixed
    direction with class-specific frequency and phase."""
    rng = np.random.default_rng([seed, 0xC1A55])
    base = _skeleton(k, m, rng)
    directions = rng.standard_normal((k, m))
    t = tr.grid(T)
    protos = []
    for c in range(classes):
        freq = rng.integers(1, 3, size=k)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=k)
        amp = rng.uniform(0.3, 0.6, size=k)
        path = amp * np.sin(2.0 * np.pi * np.outer(t, freq) + phase)
        protos.append(base + path[:, :, None] * directions)
    return np.stack(protos)


def random_warp(T, rng, strength=0.35):
    """Smooth increasing warp ``t + a sin(pi t) / pi + b sin(2 pi t) / (2 pi)`` with ``|a| + |b| < 1``."""
    a, b = rng.uniform(-strength, strength, size=2)
    t = tr.grid(T)
    gamma = t + a * np.sin(np.pi * t) / np.pi + b * np.sin(2 * np.pi * t) / (2 * np.pi)
    gamma[0], gamma[-1] = 0.0, 1.0
    return gamma


def warp_raw(frames, gamma):
    """Linear-in-time resampling of raw coordinates at times ``gamma``."""
    return tr.interpolate_field(frames, gamma)


def generate_labeled_trajectories(classes=4, per_class=40, nuisance=Nuisance(), seed=0,
                                  k=8, m=3, T=50, max_severity=0.3):
    """Labeled synthetic motions; sample ``i`` of every class belongs to subject ``i``.

    Each sample is its class prototype plus a smooth random perturbation of
    magnitude ``severity`` (uniform on ``[0, max_severity]``, stored as
    ``target``), then corrupted by the enabled nuisances.
    """
    if classes < 2:
        raise InvalidInputError("need at least 2 classes")
    protos = class_prototypes(classes, k, m, T, seed)
    rng = np.random.default_rng([seed, 0xDA7A])
    t = tr.grid(T)
    out = []
    for i in range(per_class):
        for c in range(classes):
            severity = float(rng.uniform(0.0, max_severity))
            # smooth perturbation: low-frequency landmark paths with unit RMS
            coef = rng.standard_normal((3, k, m))
            basis = np.stack([np.ones_like(t), np.sin(np.pi * t), np.cos(np.pi * t)])
            pert = np.einsum("bt,bkm->tkm", basis, coef)
            pert /= np.sqrt(np.mean(np.sum(pert ** 2, axis=(1, 2))))
            frames = protos[c] + severity * pert
            rot = geo.random_rotation(m, rng)
            scale = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
            shift = rng.uniform(-1.0, 1.0, size=m)
            gamma = random_warp(T, rng)
            if nuisance.warp:
                frames = warp_raw(frames, gamma)
            if nuisance.rotation:
                frames = frames @ rot
            if nuisance.scale:
                frames = scale * frames
            if nuisance.translation:
                frames = frames + shift
            out.append(RawSequence(frames, f"s{i:03d}", severity, c,
                                   {"class": c, "index": i}))
    return out


# ------------------------------------------------------------ preprocessing


@dataclass
class FoldContext:
    """Registration artifacts fitted on a training fold."""

    mean: np.ndarray
    reference: np.ndarray
    dp_enabled: bool


def resample_raw(frames, T):
    frames = np.asarray(frames, dtype=float)
    if frames.shape[0] == T:
        return frames.copy()
    return tr.interpolate_field(frames, tr.grid(T))


def normalize_stage(raw, stage, T):
    """Stage-wise normalisation that needs no fitted context.

    For the manifold stages this returns preshape trajectories.
    """
    if stage not in STAGES:
        raise InvalidInputError(f"unknown alignment stage {stage!r}")
    frames = resample_raw(raw.frames if isinstance(raw, RawSequence) else raw, T)
    if stage == "none":
        return frames
    if stage == "center":
        return geo.center(frames)
    return geo.to_preshape(frames)


def preprocess(raw, stage, T, context=None):
    """Model-ready sample for one sequence.

    Returns the flattened coordinates for the stages ``none``, ``center``
    and ``preshape``, and a ``(T, k, m)`` tangent field at the fold mean
    for ``kendall`` and ``kendall_tsrvf``.
    """
    x = normalize_stage(raw, stage, T)
    if stage not in MANIFOLD_STAGES:
        return x.reshape(-1)
    if context is None:
        raise InvalidInputError(f"stage {stage!r} needs a fitted fold context")
    if context.mean.shape != x.shape:
        raise InvalidInputError("fold mean does not match the sample shape")
    aligned, _, _ = reg.align_to_mean(x, context.mean, context.reference,
                                      dp_enabled=(stage == "kendall_tsrvf"))
    return geo.log_map(context.mean, aligned)


def spec_dict(spec):
    return asdict(spec)
