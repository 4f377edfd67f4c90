"""Riemannian VAE with exact reverse-mode gradients, written against numpy.

Encoder: ``D -> H`` linear, tanh, dropout, then two linear heads ``H -> L``
for the posterior mean and log-variance. Decoder: ``L -> H'`` linear, tanh,
``H' -> D`` linear. The decoder output is interpreted by an :class:`OutputHead`:

* ``kendall``: reshaped to ``(T, k, m)`` and projected onto the tangent space
  of the mean trajectory frame by frame; the reconstruction is its
  exponential map and the loss is the squared shape distance (geodesic mode)
  or the squared tangent-space error (tangent_mse mode).
* ``sphere``: same, for points on a unit sphere (no centering, no rotation
  quotient).
* ``euclidean``: raw output, squared error (the matched Euclidean VAE).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import geometry as geo
from .artifacts import write_npz
from .errors import (
    DimensionMismatchError,
    FormatVersionError,
    InvalidInputError,
    TrainingDivergenceError,
)

FORMAT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "Wm", "bm", "Wv", "bv", "W2", "b2", "W3", "b3")
LOSS_MODES = ("geodesic", "tangent_mse")


@dataclass(frozen=True)
class TrainingConfig:
    latent_dim: int = 38
    hidden: int = 128
    decoder_hidden: int = 16
    kl_weight: float = 2.0 ** -3
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int | None = None
    dropout_rate: float = 0.1
    rng_seed: int = 0
    loss_mode: str = "geodesic"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise InvalidInputError("latent_dim must be >= 1")
        if self.hidden < 1 or self.decoder_hidden < 1:
            raise InvalidInputError("hidden widths must be >= 1")
        if self.kl_weight < 0:
            raise InvalidInputError("kl_weight must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be > 0")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidInputError("dropout_rate must lie in [0, 1)")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidInputError(f"loss_mode must be one of {LOSS_MODES}")

    @classmethod
    def stroke(cls, **kw):
        return cls(**{**dict(latent_dim=38, hidden=128, decoder_hidden=16,
                             kl_weight=2.0 ** -3, epochs=100, batch_size=None), **kw})

    @classmethod
    def ntu(cls, **kw):
        return cls(**{**dict(latent_dim=48, hidden=768, decoder_hidden=768,
                             kl_weight=1e-4, epochs=150, batch_size=64), **kw})


@dataclass
class NetworkParams:
    W1: np.ndarray
    b1: np.ndarray
    Wm: np.ndarray
    bm: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def dims(self):
        """``(D, H, H', L)``."""
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0], self.Wm.shape[0]

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def copy(self):
        return NetworkParams(**{n: a.copy() for n, a in self.items()})

    def map(self, fn, other=None):
        if other is None:
            return NetworkParams(**{n: fn(a) for n, a in self.items()})
        return NetworkParams(**{n: fn(a, getattr(other, n)) for n, a in self.items()})

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.items())

    @classmethod
    def zeros(cls, D, H, H2, L):
        return cls(
            W1=np.zeros((H, D)), b1=np.zeros(H),
            Wm=np.zeros((L, H)), bm=np.zeros(L),
            Wv=np.zeros((L, H)), bv=np.zeros(L),
            W2=np.zeros((H2, L)), b2=np.zeros(H2),
            W3=np.zeros((D, H2)), b3=np.zeros(D),
        )


def init_params(D, cfg, rng):
    """Uniform ``+-1/sqrt(fan_in)`` initialisation of every weight and bias."""
    H, H2, L = cfg.hidden, cfg.decoder_hidden, cfg.latent_dim

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return NetworkParams(
        W1=u((H, D), D), b1=u(H, D),
        Wm=u((L, H), H), bm=u(L, H),
        Wv=u((L, H), H), bv=u(L, H),
        W2=u((H2, L), L), b2=u(H2, L),
        W3=u((D, H2), H2), b3=u(D, H2),
    )


@dataclass
class LatentCode:
    z: np.ndarray
    posterior_mean: np.ndarray
    posterior_logvar: np.ndarray


@dataclass
class LossBreakdown:
    reconstruction: float
    kl: float
    total: float


@dataclass(frozen=True)
class OutputHead:
    """How decoder outputs become reconstructions and losses.

    Args:
        kind: ``"kendall"``, ``"sphere"`` or ``"euclidean"``.
        base: Base point(s) of the tangent space, shape ``(T, k, m)``; unused
            for ``euclidean``.
        loss_mode: ``"geodesic"`` or ``"tangent_mse"`` (ignored for euclidean).
        out_mean, out_scale: Optional affine map applied to the raw decoder
            output before projection, ``raw * out_scale + out_mean``; used to
            undo input standardisation so the network works in standardised
            units. Identity when omitted.
    """

    kind: str
    base: np.ndarray | None = None
    loss_mode: str = "geodesic"
    out_mean: np.ndarray | None = None
    out_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("kendall", "sphere", "euclidean"):
            raise InvalidInputError(f"unknown head kind {self.kind!r}")
        if self.kind != "euclidean" and self.base is None:
            raise InvalidInputError("manifold heads need a base trajectory")

    @property
    def geodesic(self):
        return self.kind != "euclidean" and self.loss_mode == "geodesic"

    def _shape(self, n):
        return (n,) + self.base.shape

    def _tangent(self, a):
        if self.kind == "euclidean":
            return a
        b = a.reshape(self._shape(a.shape[0]))
        if self.kind == "kendall":
            w = geo.project_to_tangent(self.base, b)
        else:
            w = b - geo.inner(self.base, b)[..., None, None] * self.base
        return w.reshape(a.shape)

    def project(self, raw):
        """Map flat decoder outputs ``(N, D)`` to output fields ``(N, D)``."""
        if self.out_scale is not None:
            raw = raw * self.out_scale
        if self.out_mean is not None:
            raw = raw + self.out_mean
        return self._tangent(raw)

    def project_adjoint(self, g):
        # the tangent projections are orthogonal projectors, hence self-adjoint
        g = self._tangent(g)
        return g if self.out_scale is None else g * self.out_scale

    def exp(self, w):
        a = w.reshape(self._shape(w.shape[0]))
        return geo.exp_map(self.base, a)

    def recon(self, w, target):
        """Per-sample reconstruction losses and their gradient w.r.t. ``w``.

        ``target`` is a trajectory batch ``(N, T, k, m)`` in geodesic mode and
        a flat field batch ``(N, D)`` otherwise.
        """
        if not self.geodesic:
            diff = w - target.reshape(w.shape)
            return np.sum(diff * diff, axis=1), 2.0 * diff
        N = w.shape[0]
        xhat = self.exp(w)
        target = np.asarray(target, dtype=float).reshape(xhat.shape)
        z = geo.align(xhat, target) if self.kind == "kendall" else target
        lg = geo.log_map(xhat, z)
        loss = geo.inner(lg, lg).reshape(N, -1).sum(axis=1)
        # rotation held at its optimum: envelope condition
        grad_x = -2.0 * lg
        return loss, self._exp_adjoint(w.reshape(xhat.shape), grad_x).reshape(N, -1)

    def _exp_adjoint(self, w, g):
        """Pull an ambient cotangent at ``Exp_base(w)`` back to ``w``."""
        base = self.base
        r = geo.norm(w)
        small = r < 1e-9
        rs = np.where(small, 1.0, r)
        u = w / rs[..., None, None]
        sinc = np.where(small, 1.0, np.sin(r) / rs)
        along = -np.sin(r)[..., None, None] * base + (np.cos(r) - sinc)[..., None, None] * u
        coef = np.where(small, 0.0, geo.inner(along, g))
        return sinc[..., None, None] * g + coef[..., None, None] * u


def _check_inputs(params, V):
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[None]
    if V.shape[1] != params.W1.shape[1]:
        raise DimensionMismatchError(f"input dimension {V.shape[1]} != D={params.W1.shape[1]}")
    if not np.all(np.isfinite(V)):
        raise InvalidInputError("non-finite encoder input")
    return V


def encode(params, V, dropout_active=False, rng=None, dropout_rate=0.1):
    """Posterior parameters and a latent sample for inputs ``V`` of shape ``(N, D)``.

    With ``dropout_active=False`` no dropout is applied and ``z`` is the
    posterior mean (deterministic inference).
    """
    V = _check_inputs(params, V)
    h = np.tanh(V @ params.W1.T + params.b1)
    if dropout_active:
        keep = rng.random(h.shape) >= dropout_rate
        h = h * keep / (1.0 - dropout_rate)
    mu = h @ params.Wm.T + params.bm
    lv = h @ params.Wv.T + params.bv
    if dropout_active:
        z = mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape)
    else:
        z = mu.copy()
    return LatentCode(z, mu, lv)


def decode_raw(params, z):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != params.W2.shape[1]:
        raise DimensionMismatchError(f"latent dimension {z.shape[1]} != L={params.W2.shape[1]}")
    return np.tanh(z @ params.W2.T + params.b2) @ params.W3.T + params.b3


def decode(params, z, head):
    """Decoder output fields ``(N, D)``, tangent at the head's base for manifold heads."""
    if isinstance(z, LatentCode):
        z = z.z
    return head.project(decode_raw(params, z))


def reconstruct(params, z, head):
    """Exponential map of the decoded field (raw output for the Euclidean head)."""
    w = decode(params, z, head)
    if head.kind == "euclidean":
        return w
    return head.exp(w)


def kl_divergence(code):
    """Per-sample KL of the diagonal Gaussian posterior against N(0, I)."""
    mu = np.asarray(code.posterior_mean, dtype=float)
    lv = np.asarray(code.posterior_logvar, dtype=float)
    return 0.5 * np.sum(mu * mu + (np.expm1(lv) - lv), axis=-1)


def reconstruction_loss_geodesic(target, reconstructed):
    """Sum over frames of squared shape distances."""
    target = np.asarray(target, dtype=float)
    reconstructed = np.asarray(reconstructed, dtype=float)
    if target.shape != reconstructed.shape:
        raise DimensionMismatchError("trajectories differ in shape")
    return float(np.sum(geo.shape_distance(target, reconstructed) ** 2))


def reconstruction_loss_tangent(target_field, decoded_field):
    target_field = np.asarray(target_field, dtype=float)
    decoded_field = np.asarray(decoded_field, dtype=float)
    if target_field.shape != decoded_field.shape:
        raise DimensionMismatchError("fields differ in shape")
    return float(np.sum((target_field - decoded_field) ** 2))


def loss_and_gradient(params, V, targets, head, cfg, rng=None, mask=None, noise=None,
                      dropout=True):
    """Mean loss over a batch and its exact gradient with respect to every parameter.

    Args:
        params: Network parameters.
        V: Encoder inputs, shape ``(N, D)``.
        targets: Reconstruction targets (see :meth:`OutputHead.recon`).
        head: Output head.
        cfg: Supplies ``kl_weight`` and ``dropout_rate``.
        rng: Generator for the dropout mask and reparameterisation noise,
            drawn in that order; ignored for any array passed explicitly.
        mask: Optional fixed 0/1 dropout mask of shape ``(N, H)``.
        noise: Optional fixed standard-normal noise of shape ``(N, L)``.
        dropout: Apply dropout (training mode).

    Returns:
        ``(LossBreakdown, NetworkParams)`` with the gradient of the mean total loss.
    """
    V = _check_inputs(params, V)
    N = V.shape[0]
    p = cfg.dropout_rate if dropout else 0.0
    beta = cfg.kl_weight

    h = np.tanh(V @ params.W1.T + params.b1)
    if p > 0:
        if mask is None:
            mask = (rng.random(h.shape) >= p).astype(float)
        scale = mask / (1.0 - p)
    else:
        scale = np.ones_like(h)
    hd = h * scale
    mu = hd @ params.Wm.T + params.bm
    lv = hd @ params.Wv.T + params.bv
    if noise is None:
        noise = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * lv)
    z = mu + std * noise
    g = np.tanh(z @ params.W2.T + params.b2)
    raw = g @ params.W3.T + params.b3
    w = head.project(raw)

    recon_n, dw = head.recon(w, targets)
    kl_n = 0.5 * np.sum(mu * mu + (np.expm1(lv) - lv), axis=1)
    recon = float(np.mean(recon_n))
    kl = float(np.mean(kl_n))
    breakdown = LossBreakdown(recon, kl, recon + beta * kl)

    draw = head.project_adjoint(dw) / N
    dW3 = draw.T @ g
    db3 = draw.sum(axis=0)
    da2 = (draw @ params.W3) * (1.0 - g * g)
    dW2 = da2.T @ z
    db2 = da2.sum(axis=0)
    dz = da2 @ params.W2
    dmu = dz + beta * mu / N
    dlv = dz * 0.5 * std * noise + beta * 0.5 * np.expm1(lv) / N
    dWm = dmu.T @ hd
    dbm = dmu.sum(axis=0)
    dWv = dlv.T @ hd
    dbv = dlv.sum(axis=0)
    dh = (dmu @ params.Wm + dlv @ params.Wv) * scale
    da1 = dh * (1.0 - h * h)
    dW1 = da1.T @ V
    db1 = da1.sum(axis=0)
    grads = NetworkParams(W1=dW1, b1=db1, Wm=dWm, bm=dbm, Wv=dWv, bv=dbv,
                          W2=dW2, b2=db2, W3=dW3, b3=db3)
    return breakdown, grads


class Adam:
    """Adam with the usual moment defaults."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.map(np.zeros_like)
        self.v = params.map(np.zeros_like)
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = self.m.map(lambda m, g: b1 * m + (1 - b1) * g, grads)
        self.v = self.v.map(lambda v, g: b2 * v + (1 - b2) * g * g, grads)
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        lr, eps = self.lr, self.eps
        step = self.m.map(lambda m, v: lr * (m / c1) / (np.sqrt(v / c2) + eps), self.v)
        return params.map(lambda p, s: p - s, step)


def train(V, targets, head, cfg, params=None):
    """Fit the VAE with Adam.

    Randomness comes from two streams seeded by ``cfg.rng_seed``: one for
    the initial weights, one for shuffling, dropout masks and latent noise.

    Returns:
        ``(params, history)`` where ``history`` holds one epoch-averaged
        :class:`LossBreakdown` per epoch.

    Raises:
        TrainingDivergenceError: on a non-finite loss; carries the batch
            index, the history so far and the last finite parameters.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] == 0:
        raise InvalidInputError("training inputs must be a non-empty (N, D) array")
    targets = np.asarray(targets, dtype=float)
    N, D = V.shape
    if params is None:
        params = init_params(D, cfg, np.random.default_rng([cfg.rng_seed, 0]))
    rng = np.random.default_rng([cfg.rng_seed, 1])
    opt = Adam(params, lr=cfg.learning_rate)
    bs = N if cfg.batch_size is None else min(cfg.batch_size, N)
    history = []
    batch_index = 0
    for _ in range(cfg.epochs):
        order = np.arange(N) if bs == N else rng.permutation(N)
        rec = kl = tot = 0.0
        for start in range(0, N, bs):
            idx = order[start:start + bs]
            loss, grads = loss_and_gradient(params, V[idx], targets[idx], head, cfg, rng)
            if not np.isfinite(loss.total):
                raise TrainingDivergenceError(
                    f"non-finite loss at batch {batch_index}",
                    batch_index=batch_index, history=history, params=params,
                )
            params = opt.step(params, grads)
            w = len(idx) / N
            rec += w * loss.reconstruction
            kl += w * loss.kl
            tot += w * loss.total
            batch_index += 1
        history.append(LossBreakdown(rec, kl, tot))
    return params, history


def reorder_latents(params, posterior_means):
    """Sort latent dimensions by decreasing variance of the posterior means.

    Returns ``(permutation, reordered_params, reordered_means)``; the new
    dimension ``i`` is old dimension ``permutation[i]``. Decoding a reordered
    code with the reordered parameters matches the original decode.
    """
    codes = np.asarray(posterior_means, dtype=float)
    if codes.ndim != 2 or codes.shape[0] < 2:
        raise InvalidInputError("need at least two codes to estimate variances")
    var = codes.var(axis=0)
    perm = np.argsort(-var, kind="stable")
    new = params.copy()
    new.Wm, new.bm = params.Wm[perm], params.bm[perm]
    new.Wv, new.bv = params.Wv[perm], params.bv[perm]
    new.W2 = params.W2[:, perm]
    return perm, new, codes[:, perm]


@dataclass
class Standardizer:
    """Per-entry z-scoring fitted on training inputs."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X, floor=1e-8):
        X = np.asarray(X, dtype=float)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std < floor, 1.0, std))

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.std


@dataclass
class ModelState:
    """Everything needed to embed a new sample."""

    params: NetworkParams
    config: TrainingConfig
    head_kind: str
    mean_traj: np.ndarray | None
    reference: np.ndarray | None
    permutation: np.ndarray
    standardizer: Standardizer
    extra: dict = field(default_factory=dict)

    @property
    def head(self):
        std = self.standardizer
        return OutputHead(self.head_kind, self.mean_traj, self.config.loss_mode, std.mean, std.std)

    def embed(self, fields):
        """Deterministic latent codes (posterior means) for flat input fields."""
        V = self.standardizer.transform(np.asarray(fields).reshape(len(fields), -1))
        return encode(self.params, V).posterior_mean


def save_model(path, state):
    """Write a model archive (``.npz``) with a JSON layout header.

    ``state.extra`` (JSON-serialisable) is stored in the header verbatim.
    """
    arrays = {f"param/{n}": a for n, a in state.params.items()}
    arrays["permutation"] = np.asarray(state.permutation)
    arrays["standardizer/mean"] = state.standardizer.mean
    arrays["standardizer/std"] = state.standardizer.std
    if state.mean_traj is not None:
        arrays["mean_traj"] = state.mean_traj
    if state.reference is not None:
        arrays["reference"] = state.reference
    D, H, H2, L = state.params.dims
    dims = {"D": D, "H": H, "H_prime": H2, "L": L}
    if state.mean_traj is not None:
        dims.update(zip(("T", "k", "m"), (int(s) for s in state.mean_traj.shape)))
    header = {
        "format": "esvae-model",
        "format_version": FORMAT_VERSION,
        "dims": dims,
        "head_kind": state.head_kind,
        "config": asdict(state.config),
        "extra": state.extra,
        "layout": {n: {"shape": list(a.shape), "order": "C", "dtype": str(a.dtype)}
                   for n, a in arrays.items()},
    }
    write_npz(path, {"header": np.array(json.dumps(header, sort_keys=True)), **arrays})


def load_model(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != "esvae-model":
            raise FormatVersionError("not an esvae model archive")
        if header.get("format_version") != FORMAT_VERSION:
            raise FormatVersionError(
                f"archive format version {header.get('format_version')} != {FORMAT_VERSION}"
            )
        params = NetworkParams(**{n: data[f"param/{n}"] for n in PARAM_NAMES})
        cfg_fields = {f.name for f in fields(TrainingConfig)}
        cfg = TrainingConfig(**{k: v for k, v in header["config"].items() if k in cfg_fields})
        return ModelState(
            params=params,
            config=cfg,
            head_kind=header["head_kind"],
            mean_traj=data["mean_traj"] if "mean_traj" in data else None,
            reference=data["reference"] if "reference" in data else None,
            permutation=data["permutation"],
            standardizer=Standardizer(data["standardizer/mean"], data["standardizer/std"]),
            extra=header.get("extra", {}),
        )

