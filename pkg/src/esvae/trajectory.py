"""Trajectory geometry, TSRVF representation, and elastic time warping.

A trajectory is a ``(T, k, m)`` array of preshapes sampled on the uniform
grid ``t_i = i / (T - 1)``. A warping function is a length-``T`` array of its
values on that same grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numba
import numpy as np

from . import geometry as geo
from .errors import AntipodalPointsError, DimensionMismatchError, InvalidInputError

MAX_SLOPE = 6
ZERO_SPEED = 1e-12


def slope_set(max_slope=MAX_SLOPE):
    """Coprime DP steps ``(a, b)`` with ``1 <= a, b <= max_slope``.

    ``a`` advances the reference index, ``b`` the target index.
    """
    return np.array(
        [(a, b) for a in range(1, max_slope + 1) for b in range(1, max_slope + 1) if gcd(a, b) == 1],
        dtype=np.int64,
    )


SLOPES = slope_set()


@dataclass(frozen=True)
class TSRVF:
    """Transported square-root velocity field: ``q`` has shape ``(T, k, m)``,
    every slice tangent at ``reference``."""

    q: np.ndarray
    reference: np.ndarray

    @property
    def T(self):
        return self.q.shape[0]


def _as_trajectory(traj, name="trajectory"):
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 3:
        raise InvalidInputError(f"{name} must have shape (T, k, m), got {traj.shape}")
    if traj.shape[0] < 2:
        raise InvalidInputError(f"{name} needs at least 2 frames")
    return traj


def _same_length(a, b):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def grid(T):
    return np.linspace(0.0, 1.0, T)


def trajectory_log(base, x):
    """Frame-wise logarithm map ``Log_{base(t)} x(t)``."""
    base = _as_trajectory(base, "base")
    x = _as_trajectory(x, "x")
    _same_length(base, x)
    return geo.log_map(base, x)


def trajectory_exp(base, field):
    """Frame-wise exponential map; errors report the offending frame index."""
    base = _as_trajectory(base, "base")
    field = np.asarray(field, dtype=float)
    _same_length(base, field)
    return geo.exp_map(base, field)


def trajectory_distance_sq(x, y):
    """Sum over frames of squared shape distances."""
    return float(np.sum(geo.shape_distance(x, y) ** 2))


def align_frames(reference, traj):
    """Rotate every frame of ``traj`` onto the matching frame of ``reference``."""
    return geo.align(reference, traj)


def align_consecutive(traj):
    """Choose rotation representatives so each frame is optimally aligned to its predecessor.

    The result depends on the input only through its shape-space curve and
    the orientation of frame 0.
    """
    traj = np.array(_as_trajectory(traj), copy=True)
    for t in range(1, traj.shape[0]):
        traj[t] = geo.align(traj[t - 1], traj[t])
    return traj


def covariant_velocity(traj):
    """Forward-difference velocity ``(T - 1) Log_{b(t)} b(t + dt)``.

    The last entry is entry ``T - 2`` transported to the last frame, which for
    the connecting geodesic equals ``-(T - 1) Log_{b(1)} b(1 - dt)``.
    """
    traj = _as_trajectory(traj)
    T = traj.shape[0]
    try:
        steps = geo.log_map(traj[:-1], traj[1:])
    except AntipodalPointsError as exc:
        raise AntipodalPointsError(f"antipodal consecutive frames at {exc.frame}", frame=exc.frame) from exc
    vel = np.empty_like(traj)
    vel[:-1] = (T - 1) * steps
    vel[-1] = -(T - 1) * geo.log_map(traj[-1], traj[-2])
    return vel


def compute_tsrvf(traj, reference):
    """TSRVF of ``traj`` at ``reference``.

    Each frame is first rotated onto ``reference`` (with its velocity), then
    the velocity is transported along the preshape geodesic to ``reference``
    and divided by the square root of its norm. Zero velocity maps to zero.
    """
    traj = _as_trajectory(traj)
    reference = np.asarray(reference, dtype=float)
    vel = covariant_velocity(traj)
    rot = geo.optimal_rotation(reference, traj)
    frames = traj @ rot
    vel = vel @ rot
    try:
        moved = geo.parallel_transport(frames, reference, vel)
    except AntipodalPointsError as exc:
        raise AntipodalPointsError(
            f"frame {exc.frame} is antipodal to the TSRVF reference", frame=exc.frame
        ) from exc
    speed = geo.norm(moved)
    still = geo.norm(vel) < ZERO_SPEED
    scale = np.where(still, 0.0, 1.0 / np.sqrt(np.where(still, 1.0, speed)))
    return TSRVF(scale[:, None, None] * moved, reference)


def validate_warp(gamma, T=None, atol=1e-12):
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 1 or gamma.size < 2:
        raise InvalidInputError("warping function must be a 1-D array with at least 2 samples")
    if T is not None and gamma.size != T:
        raise DimensionMismatchError(f"warp has {gamma.size} samples, expected {T}")
    if abs(gamma[0]) > atol or abs(gamma[-1] - 1.0) > atol:
        raise InvalidInputError("warping function must satisfy gamma(0)=0 and gamma(1)=1")
    if np.any(np.diff(gamma) < -atol):
        raise InvalidInputError("warping function must be nondecreasing")
    return gamma


def warp_derivative(gamma):
    """Forward-difference derivative on the uniform grid, last entry replicated."""
    T = gamma.size
    d = np.empty(T)
    d[:-1] = np.diff(gamma) * (T - 1)
    d[-1] = d[-2]
    return d


def _interp_index(pos, T):
    fl = np.minimum(np.floor(pos).astype(np.int64), T - 2)
    fl = np.maximum(fl, 0)
    return fl, pos - fl


def interpolate_field(q, gamma):
    """Linear interpolation of a ``(T, ...)`` field at times ``gamma``."""
    T = q.shape[0]
    fl, fr = _interp_index(np.asarray(gamma) * (T - 1), T)
    fr = fr.reshape((-1,) + (1,) * (q.ndim - 1))
    return (1.0 - fr) * q[fl] + fr * q[fl + 1]


def warp_action(q, gamma):
    """Act on a TSRVF by a warp: ``(q o gamma) * sqrt(gamma')``."""
    gamma = validate_warp(gamma, q.T)
    dg = np.maximum(warp_derivative(gamma), 0.0)
    out = interpolate_field(q.q, gamma) * np.sqrt(dg)[:, None, None]
    return TSRVF(out, q.reference)


def tsrvf_cost(q1, q2):
    """Discretised squared L2 distance ``sum ||q1 - q2||^2 dt`` between two TSRVFs."""
    a = q1.q if isinstance(q1, TSRVF) else q1
    b = q2.q if isinstance(q2, TSRVF) else q2
    _same_length(a, b)
    return float(np.sum((a - b) ** 2) / (a.shape[0] - 1))


@numba.njit(cache=True, nogil=True)
def _dp_kernel(q1, q2, slopes, dt):
    T, D = q1.shape
    S = slopes.shape[0]
    energy = np.full((T, T), np.inf)
    pred = np.full((T, T), -1, dtype=np.int64)
    energy[0, 0] = 0.0
    for i in range(1, T):
        for j in range(1, T):
            best = np.inf
            arg = -1
            for si in range(S):
                a = slopes[si, 0]
                b = slopes[si, 1]
                if a > i or b > j:
                    continue
                prev = energy[i - a, j - b]
                if prev == np.inf:
                    continue
                r = b / a
                sr = np.sqrt(r)
                c = 0.0
                for s in range(a):
                    pos = (j - b) + s * r
                    fl = int(np.floor(pos))
                    if fl > T - 2:
                        fl = T - 2
                    fr = pos - fl
                    for d in range(D):
                        qi = (1.0 - fr) * q2[fl, d] + fr * q2[fl + 1, d]
                        diff = q1[i - a + s, d] - qi * sr
                        c += diff * diff
                if i == T - 1 and j == T - 1:
                    # the final grid sample takes the slope of the last segment
                    for d in range(D):
                        diff = q1[T - 1, d] - q2[T - 1, d] * sr
                        c += diff * diff
                total = prev + c * dt
                if total < best:
                    best = total
                    arg = si
            energy[i, j] = best
            pred[i, j] = arg
    return energy, pred


def path_to_warp(nodes, T):
    """Convert lattice nodes ``[(i0, j0), ..., (T-1, T-1)]`` to warp values on the grid."""
    gamma = np.empty(T)
    for (i0, j0), (i1, j1) in zip(nodes[:-1], nodes[1:]):
        r = (j1 - j0) / (i1 - i0)
        for s in range(i1 - i0):
            gamma[i0 + s] = (j0 + s * r) / (T - 1)
    gamma[-1] = 1.0
    return gamma


def optimal_warp(q_ref, q_target, slopes=SLOPES, return_cost=False):
    """Dynamic-programming warp aligning ``q_target`` to ``q_ref``.

    Minimises ``tsrvf_cost(q_ref, warp_action(q_target, gamma))`` over
    piecewise-linear warps through the ``T x T`` lattice whose segments have
    slopes ``b / a`` from ``slopes``.
    """
    a = q_ref.q if isinstance(q_ref, TSRVF) else np.asarray(q_ref)
    b = q_target.q if isinstance(q_target, TSRVF) else np.asarray(q_target)
    _same_length(a, b)
    T = a.shape[0]
    if T < 2:
        raise InvalidInputError("need at least 2 samples")
    q1 = np.ascontiguousarray(a.reshape(T, -1), dtype=float)
    q2 = np.ascontiguousarray(b.reshape(T, -1), dtype=float)
    energy, pred = _dp_kernel(q1, q2, np.asarray(slopes, dtype=np.int64), 1.0 / (T - 1))
    nodes = [(T - 1, T - 1)]
    i, j = T - 1, T - 1
    while (i, j) != (0, 0):
        si = pred[i, j]
        i, j = i - slopes[si][0], j - slopes[si][1]
        nodes.append((int(i), int(j)))
    gamma = path_to_warp(nodes[::-1], T)
    if return_cost:
        return gamma, float(energy[T - 1, T - 1])
    return gamma


def _geodesic_resample(traj, positions):
    T = traj.shape[0]
    # positions that are grid points up to rounding hit the sample exactly
    nearest = np.round(positions)
    positions = np.where(np.abs(positions - nearest) < 1e-9, nearest, positions)
    fl, fr = _interp_index(positions, T)
    out = geo.slerp(traj[fl], traj[fl + 1], fr)
    # keep grid hits bit-exact
    out = np.where((fr == 0.0)[:, None, None], traj[fl], out)
    out = np.where((fr == 1.0)[:, None, None], traj[np.minimum(fl + 1, T - 1)], out)
    return out


def apply_warp(traj, gamma):
    """Reparameterise a trajectory: frame ``i`` is ``traj(gamma(t_i))`` by slerp between samples."""
    traj = _as_trajectory(traj)
    gamma = validate_warp(gamma, traj.shape[0])
    return _geodesic_resample(traj, gamma * (traj.shape[0] - 1))


def resample_trajectory(traj, T_new):
    """Geodesic interpolation onto a uniform grid of ``T_new`` samples."""
    traj = _as_trajectory(traj)
    if T_new < 2:
        raise InvalidInputError("T_new must be at least 2")
    T = traj.shape[0]
    if T_new == T:
        return traj.copy()
    return _geodesic_resample(traj, np.linspace(0.0, T - 1, T_new))


def compose_warps(outer, inner):
    """``(outer o inner)`` evaluated on the grid, by linear interpolation of ``outer``."""
    return np.interp(inner, grid(outer.size), outer)
