"""Differential geometry of the preshape sphere and Kendall shape space.

A configuration is a ``(k, m)`` array of landmark coordinates. Every function
here broadcasts over leading axes, so a trajectory of ``T`` frames is simply a
``(T, k, m)`` array and the same calls apply frame-wise.

The preshape sphere is the unit sphere (Frobenius norm) inside the space of
centered ``k x m`` matrices. Shape space is its quotient by right
multiplication with ``SO(m)``; shape-space quantities are computed on
representatives that have been optimally rotated onto each other.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    AntipodalPointsError,
    DegenerateConfigurationError,
    InjectivityRadiusError,
    InvalidInputError,
)

DEGENERACY_THRESHOLD = 1e-12
ZERO_GEODESIC = 1e-12
ANTIPODAL_MARGIN = 1e-6


def inner(a, b):
    """Frobenius inner product ``tr(a^T b)`` over the last two axes."""
    return np.einsum("...ij,...ij->...", a, b)


def norm(a):
    return np.sqrt(np.maximum(inner(a, a), 0.0))


def _check_finite(a, name="input"):
    a = np.asarray(a, dtype=float)
    if a.ndim < 2:
        raise InvalidInputError(f"{name} must have at least 2 dimensions, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def _first_index(mask):
    idx = np.argwhere(np.atleast_1d(mask))
    return tuple(int(i) for i in idx[0]) if len(idx) else None


def center(cfg):
    """Subtract the column (landmark) means."""
    cfg = _check_finite(cfg, "configuration")
    return cfg - cfg.mean(axis=-2, keepdims=True)


def to_preshape(cfg, threshold=DEGENERACY_THRESHOLD):
    """Center and scale a configuration to unit Frobenius norm.

    Raises:
        DegenerateConfigurationError: if the centered norm is at or below
            ``threshold`` (all landmarks coincide).
    """
    c = center(cfg)
    n = norm(c)
    bad = n <= threshold
    if np.any(bad):
        where = _first_index(bad)
        raise DegenerateConfigurationError(
            f"degenerate configuration (centered norm {np.min(n):.3g})"
            + (f" at index {where}" if where else "")
        )
    return c / n[..., None, None]


def is_preshape(x, atol=1e-10):
    x = np.asarray(x, dtype=float)
    centered = np.all(np.abs(x.sum(axis=-2)) < atol)
    unit = np.all(np.abs(norm(x) - 1.0) < atol)
    return bool(centered and unit)


def preshape_distance(x, y):
    """Great-circle distance ``arccos <x, y>`` on the preshape sphere.

    Evaluated as ``atan2(||y - <x,y> x||, <x,y>)`` for accuracy near 0 and pi.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    c = inner(x, y)
    return np.arctan2(norm(y - c[..., None, None] * x), c)


def _procrustes(x, y):
    a = np.swapaxes(x, -1, -2) @ y
    u, s, vt = np.linalg.svd(a)
    v = np.swapaxes(vt, -1, -2)
    d = np.sign(np.linalg.det(u) * np.linalg.det(v))
    d = np.where(d == 0, 1.0, d)
    fix = np.ones(s.shape)
    fix[..., -1] = d
    rot = (v * fix[..., None, :]) @ np.swapaxes(u, -1, -2)
    return rot, s, d


def optimal_rotation(x, y, return_unique=False):
    """Rotation ``R`` in SO(m) minimising ``d_S(x, y @ R)``.

    Solved by orthogonal Procrustes on ``x^T y``; when the unconstrained
    optimum is a reflection the singular direction with the smallest
    singular value is flipped.

    Args:
        x: Target preshape(s), shape ``(..., k, m)``.
        y: Preshape(s) to rotate onto ``x``.
        return_unique: Also return a boolean flag that is False when the
            optimum is not unique (rank-deficient cross-covariance).

    Returns:
        ``R`` with shape ``(..., m, m)``, or ``(R, unique)``.
    """
    rot, s, d = _procrustes(np.asarray(x, float), np.asarray(y, float))
    if not return_unique:
        return rot
    # the objective is sum(s[:-1]) + d*s[-1]; ties occur when the last two
    # singular contributions can be traded against each other
    gap = s[..., -2] + d * s[..., -1]
    unique = gap > 1e-10 * np.maximum(s[..., 0], 1e-300)
    return rot, unique


def align(x, y):
    """Return ``y`` optimally rotated onto ``x``."""
    y = np.asarray(y, float)
    return y @ optimal_rotation(x, y)


def shape_distance(x, y):
    """Geodesic distance in Kendall shape space between the classes of ``x`` and ``y``."""
    return preshape_distance(x, align(x, y))


def exp_map(base, w):
    """Exponential map of the preshape sphere at ``base``.

    Raises:
        InjectivityRadiusError: if ``||w||_F >= pi`` anywhere.
    """
    base = np.asarray(base, float)
    w = np.asarray(w, float)
    r = norm(w)
    too_long = r >= np.pi
    if np.any(too_long):
        where = _first_index(too_long)
        raise InjectivityRadiusError(
            f"tangent norm {np.max(r):.6g} >= pi" + (f" at index {where}" if where else ""),
            frame=where[0] if where else None,
        )
    small = r < ZERO_GEODESIC
    safe_r = np.where(small, 1.0, r)
    out = np.cos(r)[..., None, None] * base + (np.sin(r) / safe_r)[..., None, None] * w
    if np.any(small):
        near = base + w
        near = near / norm(near)[..., None, None]
        out = np.where(small[..., None, None], near, out)
    return out


def log_map(base, x):
    """Logarithm map of the preshape sphere at ``base``.

    The angle is computed as ``atan2(||x - <x,b> b||, <x,b>)``, which equals
    ``arccos <x, b>`` but keeps full relative accuracy for short geodesics.

    Raises:
        AntipodalPointsError: if ``d_S(base, x) >= pi - 1e-6``.
    """
    base = np.asarray(base, float)
    x = np.asarray(x, float)
    c = inner(base, x)
    perp = x - c[..., None, None] * base
    s = norm(perp)
    theta = np.arctan2(s, c)
    anti = theta >= np.pi - ANTIPODAL_MARGIN
    if np.any(anti):
        where = _first_index(anti)
        raise AntipodalPointsError(
            "log map undefined for antipodal points" + (f" at index {where}" if where else ""),
            frame=where[0] if where else None,
        )
    zero = theta < ZERO_GEODESIC
    scale = np.where(zero, 0.0, theta / np.where(s > 0, s, 1.0))
    return scale[..., None, None] * perp


def parallel_transport(src, dst, w):
    """Transport ``w`` (tangent at ``src``) along the geodesic from ``src`` to ``dst``."""
    src = np.asarray(src, float)
    w = np.asarray(w, float)
    u = log_map(src, dst)
    theta = norm(u)
    moving = theta >= ZERO_GEODESIC
    u_hat = u / np.where(moving, theta, 1.0)[..., None, None]
    a = np.where(moving, inner(u_hat, w), 0.0)[..., None, None]
    th = theta[..., None, None]
    return w + (np.cos(th) - 1.0) * a * u_hat - np.sin(th) * a * src


def project_to_tangent(base, a):
    """Project an arbitrary ``(k, m)`` array onto the tangent space at ``base``."""
    a = np.asarray(a, float)
    c = a - a.mean(axis=-2, keepdims=True)
    return c - inner(base, c)[..., None, None] * base


def slerp(x, y, t):
    """Point at fraction ``t`` along the preshape geodesic from ``x`` to ``y``."""
    t = np.asarray(t, float)
    return exp_map(x, t[..., None, None] * log_map(x, y))


def random_rotation(m, rng, size=None):
    """Haar-distributed rotation(s) in SO(m)."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    z = rng.standard_normal(shape + (m, m))
    q, r = np.linalg.qr(z)
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    det = np.linalg.det(q)
    q[..., :, 0] *= np.sign(det)[..., None]
    return q


def random_tangent(base, rng, scale=1.0):
    """Random tangent vector at ``base`` with Gaussian entries before projection."""
    base = np.asarray(base, float)
    return scale * project_to_tangent(base, rng.standard_normal(base.shape))
