import json
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esvae import geometry as geo
from esvae import pca
from esvae import rvae
from esvae import trajectory as tr
from esvae.errors import (
    DimensionMismatchError,
    FormatVersionError,
    InvalidInputError,
    TrainingDivergenceError,
)

from conftest import random_preshape, smooth_trajectory
from gradcheck import gradient_instance, relative_errors


def small_setup(rng, T=5, k=4, m=3, L=2, H=6, H2=4, **cfg_kw):
    base = smooth_trajectory(rng, T=T, k=k, m=m)
    cfg = rvae.TrainingConfig(latent_dim=L, hidden=H, decoder_hidden=H2, **cfg_kw)
    params = rvae.init_params(base.size, cfg, rng)
    return base, cfg, params


# configuration and parameters

def test_config_validation():
    for bad in (dict(latent_dim=0), dict(kl_weight=-1.0), dict(learning_rate=0.0),
                dict(dropout_rate=1.0), dict(epochs=-1), dict(loss_mode="l1")):
        with pytest.raises(InvalidInputError):
            rvae.TrainingConfig(**bad)


def test_profiles():
    s, n = rvae.TrainingConfig.stroke(), rvae.TrainingConfig.ntu()
    assert (s.latent_dim, s.hidden, s.decoder_hidden, s.kl_weight) == (38, 128, 16, 2.0 ** -3)
    assert (n.latent_dim, n.hidden, n.decoder_hidden, n.kl_weight) == (48, 768, 768, 1e-4)
    assert n.batch_size == 64 and s.batch_size is None


def test_init_dimensions_and_bounds(rng):
    cfg = rvae.TrainingConfig(latent_dim=3, hidden=7, decoder_hidden=5)
    p = rvae.init_params(11, cfg, rng)
    assert p.dims == (11, 7, 5, 3)
    fan_in = {"W1": 11, "b1": 11, "Wm": 7, "bm": 7, "Wv": 7, "bv": 7,
              "W2": 3, "b2": 3, "W3": 5, "b3": 5}
    for name, a in p.items():
        assert np.all(np.abs(a) <= 1 / np.sqrt(fan_in[name]))


# encoder

def test_zero_network_encodes_to_zero():
    p = rvae.NetworkParams.zeros(6, 4, 3, 2)
    code = rvae.encode(p, np.ones((3, 6)))
    assert np.all(code.posterior_mean == 0) and np.all(code.posterior_logvar == 0)
    assert np.all(code.z == 0)


def test_identity_network_posterior_mean_is_tanh(rng):
    D = 4
    p = rvae.NetworkParams.zeros(D, D, 2, D)
    p.W1 = np.eye(D)
    p.Wm = np.eye(D)
    v = rng.standard_normal((5, D))
    assert np.allclose(rvae.encode(p, v).posterior_mean, np.tanh(v), atol=1e-15)


def test_sampled_code_is_reproducible(rng):
    base, cfg, p = small_setup(rng)
    V = rng.standard_normal((4, base.size))
    a = rvae.encode(p, V, True, np.random.default_rng(7))
    b = rvae.encode(p, V, True, np.random.default_rng(7))
    assert np.array_equal(a.z, b.z)


def test_encode_rejects_wrong_dimension(rng):
    _, _, p = small_setup(rng)
    with pytest.raises(DimensionMismatchError):
        rvae.encode(p, np.zeros((2, 3)))


# decoder

def test_zero_decoder_gives_zero_field_and_the_mean(rng):
    base = smooth_trajectory(rng, T=4)
    p = rvae.NetworkParams.zeros(base.size, 3, 3, 2)
    head = rvae.OutputHead("kendall", base)
    assert np.all(rvae.decode(p, np.ones((2, 2)), head) == 0)
    assert np.array_equal(rvae.reconstruct(p, np.ones((2, 2)), head)[0], base)


def test_decoder_output_is_tangent_and_centered(rng):
    base, cfg, p = small_setup(rng)
    head = rvae.OutputHead("kendall", base)
    w = rvae.decode(p, rng.standard_normal((6, 2)) * 3, head).reshape((6,) + base.shape)
    assert np.max(np.abs(geo.inner(base, w))) < 1e-10
    assert np.max(np.abs(w.sum(axis=2))) < 1e-12


def test_decoder_matches_hand_computed_forward(rng):
    base = smooth_trajectory(rng, T=2, k=3, m=2)
    D = base.size
    p = rvae.NetworkParams.zeros(D, 2, 2, 1)
    p.W2 = np.array([[1.0], [-2.0]])
    p.b2 = np.array([0.5, 0.0])
    p.W3 = rng.standard_normal((D, 2))
    p.b3 = rng.standard_normal(D)
    z = np.array([[0.3]])
    raw = p.W3 @ np.tanh(np.array([0.3 + 0.5, -0.6])) + p.b3
    head = rvae.OutputHead("kendall", base)
    expected = geo.project_to_tangent(base, raw.reshape(base.shape))
    assert np.allclose(rvae.decode(p, z, head)[0].reshape(base.shape), expected, atol=1e-14)


def test_reconstruction_round_trips_through_log(rng):
    base, cfg, p = small_setup(rng)
    head = rvae.OutputHead("kendall", base)
    z = rng.standard_normal((1, 2))
    w = rvae.decode(p, z, head)[0].reshape(base.shape)
    x = rvae.reconstruct(p, z, head)[0]
    assert np.max(geo.norm(tr.trajectory_log(base, x) - w)) < 1e-9
    # per-frame distance to the mean equals the decoded norm
    assert np.allclose(geo.preshape_distance(base, x), geo.norm(w), atol=1e-12)


def test_affine_output_map(rng):
    base, cfg, p = small_setup(rng)
    D = base.size
    mean, scale = rng.standard_normal(D), rng.uniform(0.5, 2.0, D)
    head = rvae.OutputHead("kendall", base, out_mean=mean, out_scale=scale)
    z = rng.standard_normal((2, 2))
    raw = rvae.decode_raw(p, z)
    expected = geo.project_to_tangent(base, (raw * scale + mean).reshape((2,) + base.shape))
    assert np.allclose(rvae.decode(p, z, head), expected.reshape(2, -1), atol=1e-14)


# losses

def test_kl_analytic_values():
    def kl(mu, var):
        return rvae.kl_divergence(rvae.LatentCode(None, np.array([mu]), np.log(np.array([var]))))

    assert abs(kl(0.0, 1.0)) <= 1e-12
    assert abs(kl(1.0, 1.0) - 0.5) <= 1e-12
    assert abs(kl(0.0, np.e) - (np.e - 2) / 2) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_kl_is_nonnegative(mu, lv):
    code = rvae.LatentCode(None, np.array(mu), np.array(lv))
    assert rvae.kl_divergence(code) >= 0.0


def test_geodesic_loss_oracles(rng):
    x = smooth_trajectory(rng, T=4)
    assert rvae.reconstruction_loss_geodesic(x, x) < 1e-20
    rotated = x @ geo.random_rotation(3, rng, 4)
    assert rvae.reconstruction_loss_geodesic(x, rotated) < 1e-8
    # single frame at a known angle; on principal axes y^T y is diagonal, so
    # with v = P(y S), S diagonal, y^T yy is symmetric positive and R* = I
    y = random_preshape(rng, 6, 3)
    y = y @ np.linalg.svd(y, full_matrices=False)[2].T
    v = geo.project_to_tangent(y, y @ np.diag([1.0, -1.0, 0.5]))
    v /= geo.norm(v)
    for theta in (0.1, 0.7):
        yy = np.cos(theta) * y + np.sin(theta) * v
        assert np.allclose(geo.optimal_rotation(y, yy), np.eye(3), atol=1e-10)
        assert abs(rvae.reconstruction_loss_geodesic(y[None], yy[None]) - theta ** 2) < 1e-10


def test_geodesic_loss_rotation_invariance(rng):
    base, cfg, p = small_setup(rng, loss_mode="geodesic")
    head = rvae.OutputHead("kendall", base)
    V = rng.standard_normal((3, base.size))
    target = np.stack([smooth_trajectory(rng, T=5, k=4) for _ in range(3)])
    kw = dict(mask=np.ones((3, 6)), noise=np.zeros((3, 2)), dropout=False)
    a = rvae.loss_and_gradient(p, V, target, head, cfg, **kw)[0]
    rotated = target @ geo.random_rotation(3, rng, (3, 5))
    b = rvae.loss_and_gradient(p, V, rotated, head, cfg, **kw)[0]
    assert abs(a.reconstruction - b.reconstruction) < 1e-8


def test_tangent_loss_oracles(rng):
    a, b = rng.standard_normal((2, 5, 4, 3))
    assert rvae.reconstruction_loss_tangent(a, a) == 0.0
    assert np.isclose(rvae.reconstruction_loss_tangent(a, np.zeros_like(a)), np.sum(a ** 2))
    brute = sum((a[i, j, l] - b[i, j, l]) ** 2 for i in range(5) for j in range(4) for l in range(3))
    assert abs(rvae.reconstruction_loss_tangent(a, b) - brute) < 1e-12
    with pytest.raises(DimensionMismatchError):
        rvae.reconstruction_loss_tangent(a, b[:2])


def test_elbo_decomposition(rng):
    base, cfg, p = small_setup(rng, kl_weight=0.3)
    head = rvae.OutputHead("kendall", base)
    V = rng.standard_normal((4, base.size))
    loss, _ = rvae.loss_and_gradient(p, V, np.stack([base] * 4), head, cfg, np.random.default_rng(1))
    assert loss.kl >= 0
    assert abs(loss.total - (loss.reconstruction + cfg.kl_weight * loss.kl)) < 1e-10


# gradients

@pytest.mark.parametrize("loss_mode", rvae.LOSS_MODES)
@pytest.mark.parametrize("kind,affine", [("kendall", False), ("kendall", True), ("sphere", False),
                                         ("euclidean", False)])
def test_gradient_matches_finite_differences(loss_mode, kind, affine):
    rng = np.random.default_rng(2024)
    params, V, targets, head, cfg, mask, noise = gradient_instance(rng, loss_mode, kind=kind,
                                                                   affine=affine)
    errs = relative_errors(params, V, targets, head, cfg, mask, noise)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("loss_mode", rvae.LOSS_MODES)
def test_gradient_without_dropout(loss_mode):
    rng = np.random.default_rng(5)
    params, V, targets, head, cfg, _, noise = gradient_instance(rng, loss_mode)
    cfg = rvae.TrainingConfig(latent_dim=2, hidden=8, decoder_hidden=4, kl_weight=0.37,
                              dropout_rate=0.0, loss_mode=loss_mode)
    errs = relative_errors(params, V, targets, head, cfg, None, noise)
    assert max(errs.values()) < 1e-4, errs


def test_zero_network_output_bias_gradient(rng):
    base = smooth_trajectory(rng, T=4)
    D = base.size
    cfg = rvae.TrainingConfig(latent_dim=2, hidden=3, decoder_hidden=3, kl_weight=0.0,
                              loss_mode="tangent_mse", dropout_rate=0.0)
    p = rvae.NetworkParams.zeros(D, 3, 3, 2)
    head = rvae.OutputHead("kendall", base, "tangent_mse")
    targets = head.project(rng.standard_normal((5, D)))
    _, g = rvae.loss_and_gradient(p, np.zeros((5, D)), targets, head, cfg, noise=np.zeros((5, 2)))
    assert np.allclose(g.b3, -2.0 * targets.mean(axis=0), atol=1e-14)


def test_gradient_vanishes_at_perfect_reconstruction(rng):
    base = smooth_trajectory(rng, T=4)
    D = base.size
    cfg = rvae.TrainingConfig(latent_dim=2, hidden=3, decoder_hidden=3, kl_weight=0.0,
                              dropout_rate=0.0)
    p = rvae.NetworkParams.zeros(D, 3, 3, 2)
    head = rvae.OutputHead("kendall", base)
    w = head.project(0.3 * rng.standard_normal((1, D)))
    p.b3 = w[0]
    target = head.exp(w) @ geo.random_rotation(3, rng, 4)
    _, g = rvae.loss_and_gradient(p, np.zeros((1, D)), target, head, cfg, noise=np.zeros((1, 2)))
    assert np.sqrt(sum(np.sum(a ** 2) for _, a in g.items())) < 1e-8


# training

def test_training_reduces_single_trajectory_loss(rng):
    base = smooth_trajectory(rng, T=5, k=4)
    target = geo.exp_map(base, geo.random_tangent(base, rng, 0.3))
    field = tr.trajectory_log(base, target)
    cfg = rvae.TrainingConfig(latent_dim=2, hidden=8, decoder_hidden=8, kl_weight=1e-3,
                              epochs=300, learning_rate=1e-2, dropout_rate=0.0)
    head = rvae.OutputHead("kendall", base)
    _, hist = rvae.train(field.reshape(1, -1), target[None], head, cfg)
    assert hist[-1].reconstruction < 0.1 * hist[0].reconstruction


def test_training_is_deterministic_and_finite(rng):
    base, cfg, _ = small_setup(rng, epochs=5, batch_size=2)
    head = rvae.OutputHead("kendall", base)
    fields = head.project(0.1 * rng.standard_normal((5, base.size)))
    targets = head.exp(fields)
    a, ha = rvae.train(fields, targets, head, cfg)
    b, hb = rvae.train(fields, targets, head, cfg)
    assert a.all_finite()
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.items(), b.items()))
    assert ha == hb


def test_zero_epochs_returns_initial_params(rng):
    base, cfg, p = small_setup(rng, epochs=0)
    head = rvae.OutputHead("kendall", base)
    fields = head.project(rng.standard_normal((3, base.size)))
    out, hist = rvae.train(fields, head.exp(0.1 * fields), head, cfg, params=p)
    assert hist == []
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(out.items(), p.items()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported(rng):
    base, cfg, _ = small_setup(rng, epochs=3)
    head = rvae.OutputHead("euclidean")
    V = np.ones((3, base.size))
    with pytest.raises(TrainingDivergenceError) as info:
        rvae.train(V, np.full((3, base.size), np.inf), head, cfg)
    assert info.value.batch_index == 0


# latent reordering

def test_reorder_permutations():
    p = rvae.NetworkParams.zeros(3, 2, 2, 2)
    codes = np.array([[0.0, 0.0], [2.0, 1.0], [-2.0, -1.0]])
    perm, _, _ = rvae.reorder_latents(p, codes)
    assert list(perm) == [0, 1]
    perm, _, new = rvae.reorder_latents(p, codes[:, ::-1])
    assert list(perm) == [1, 0]
    assert np.array_equal(new, codes)


def test_reorder_is_a_conjugation(rng):
    base, cfg, p = small_setup(rng, L=4)
    head = rvae.OutputHead("kendall", base)
    V = rng.standard_normal((10, base.size))
    codes = rvae.encode(p, V).posterior_mean
    perm, q, new_codes = rvae.reorder_latents(p, codes)
    assert np.allclose(rvae.encode(q, V).posterior_mean, new_codes, atol=1e-12)
    z = rng.standard_normal((3, 4))
    assert np.allclose(rvae.decode(p, z, head), rvae.decode(q, z[:, perm], head), atol=1e-12)
    assert np.all(np.diff(new_codes.var(axis=0)) <= 0)


# persistence

def make_state(rng):
    base, cfg, p = small_setup(rng)
    fields = rng.standard_normal((6, base.size))
    return rvae.ModelState(p, cfg, "kendall", base, base[0], np.array([1, 0]),
                           rvae.Standardizer.fit(fields), {"stage": "kendall"}), fields


def test_save_load_round_trip(rng, tmp_path):
    state, fields = make_state(rng)
    rvae.save_model(tmp_path / "m.npz", state)
    back = rvae.load_model(tmp_path / "m.npz")
    assert back.config == state.config and back.extra == state.extra
    assert np.array_equal(back.embed(fields), state.embed(fields))
    rvae.save_model(tmp_path / "m2.npz", back)
    assert (tmp_path / "m.npz").read_bytes() == (tmp_path / "m2.npz").read_bytes()


def test_load_rejects_other_format_version(rng, tmp_path):
    state, _ = make_state(rng)
    rvae.save_model(tmp_path / "m.npz", state)
    with np.load(tmp_path / "m.npz") as data:
        arrays = {k: data[k] for k in data.files}
    header = json.loads(str(arrays["header"]))
    header["format_version"] = rvae.FORMAT_VERSION + 1
    arrays["header"] = np.array(json.dumps(header))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(FormatVersionError):
        rvae.load_model(tmp_path / "bad.npz")


def test_archive_header_records_layout(rng, tmp_path):
    state, _ = make_state(rng)
    rvae.save_model(tmp_path / "m.npz", state)
    with zipfile.ZipFile(tmp_path / "m.npz") as z:
        assert "header.npy" in z.namelist()
    header = json.loads(str(np.load(tmp_path / "m.npz")["header"]))
    assert header["dims"] == {"D": 60, "H": 6, "H_prime": 4, "L": 2, "T": 5, "k": 4, "m": 3}
    assert header["layout"]["param/W1"]["shape"] == [6, 60]


# PCA baselines

def test_pca_single_line():
    t = np.linspace(-1, 1, 9)[:, None]
    X = t * np.array([[1.0, 2.0, -1.0]])
    model = pca.fit_pca(X, 1)
    assert np.allclose(model.denoise(X), X, atol=1e-12)
    full = pca.fit_pca(X, 2)
    assert full.explained_variance[1] < 1e-25


def test_pca_matches_covariance_eigendecomposition(rng):
    X = rng.standard_normal((5, 6))
    model = pca.fit_pca(X, 4)
    evals = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1][:4]
    assert np.allclose(model.explained_variance, evals, atol=1e-12)
    assert np.allclose(model.denoise(X), X, atol=1e-9)


def test_pca_rank_j_and_validation(rng):
    X = rng.standard_normal((20, 3)) @ rng.standard_normal((3, 8))
    assert np.allclose(pca.fit_pca(X, 3).denoise(X), X, atol=1e-9)
    with pytest.raises(InvalidInputError):
        pca.fit_pca(X, 0)
    with pytest.raises(InvalidInputError):
        pca.fit_pca(X, 9)


def test_tangent_pca_reconstructions_are_on_the_manifold(rng):
    base = random_preshape(rng, 5, 3)
    fields = np.stack([geo.random_tangent(base, rng, 0.2) for _ in range(8)])
    model = pca.tangent_pca(fields, 2)
    w = geo.project_to_tangent(base, model.denoise(fields.reshape(8, -1)).reshape(fields.shape))
    assert np.allclose(geo.norm(geo.exp_map(base, w)), 1.0, atol=1e-12)


def test_euclidean_vae_zero_params_reconstructs_zero():
    p = rvae.NetworkParams.zeros(6, 3, 3, 1)
    head = rvae.OutputHead("euclidean")
    assert np.all(rvae.reconstruct(p, np.ones((2, 1)), head) == 0)


def test_euclidean_and_riemannian_tangent_training_share_streams(rng):
    # equal seeds give equal initial weights and random streams; the projected
    # tangent loss never exceeds the Euclidean loss on tangent targets
    base = smooth_trajectory(rng, T=4)
    head_r = rvae.OutputHead("kendall", base, "tangent_mse")
    head_e = rvae.OutputHead("euclidean")
    fields = head_r.project(0.2 * rng.standard_normal((6, base.size)))
    cfg = rvae.TrainingConfig(latent_dim=2, hidden=5, decoder_hidden=5, epochs=0,
                              loss_mode="tangent_mse")
    pr, _ = rvae.train(fields, fields, head_r, cfg)
    pe, _ = rvae.train(fields, fields, head_e, cfg)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(pr.items(), pe.items()))
    lr = rvae.loss_and_gradient(pr, fields, fields, head_r, cfg, np.random.default_rng([0, 1]))[0]
    le = rvae.loss_and_gradient(pe, fields, fields, head_e, cfg, np.random.default_rng([0, 1]))[0]
    assert lr.kl == le.kl
    assert lr.reconstruction <= le.reconstruction + 1e-12
