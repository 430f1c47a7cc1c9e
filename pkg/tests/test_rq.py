"""Tests for residual quantization: RQ-KMeans and the RQ-VAE."""

import numpy as np
import pytest

from sidforge import numkit
from sidforge.errors import ConfigurationError, NumericError, ShapeError
from sidforge.rq import (Codebook, RqVaeConfig, RqVaeModel, _ema_update,
                         quantize, rq_assign, rq_assign_batch, rq_kmeans_fit,
                         rq_vae_fit, rq_vae_loss_grads)


def _oracle_assign(levels, v):
    """Naive per-level nearest-codeword loop."""
    tokens, norms, r = [], [], v.astype(np.float64).copy()
    for lvl in range(levels.shape[0]):
        norms.append(np.linalg.norm(r))
        best, best_d = 0, np.inf
        for k in range(levels.shape[1]):
            d = np.sum((r - levels[lvl, k]) ** 2)
            if d < best_d - 1e-15:
                best, best_d = k, d
        tokens.append(best)
        r = r - levels[lvl, best]
    norms.append(np.linalg.norm(r))
    return np.array(tokens), np.array(norms)


def test_codebook_validation():
    with pytest.raises(ShapeError):
        Codebook(levels=np.zeros((2, 3)))
    with pytest.raises(NumericError):
        Codebook(levels=np.full((1, 2, 2), np.nan))
    cb = Codebook(levels=np.zeros((2, 5, 3)))
    assert (cb.L, cb.K, cb.dim) == (2, 5, 3)


def test_rq_kmeans_levels_reduce_residual(rng):
    x = rng.normal(size=(200, 6))
    cb = rq_kmeans_fit(x, L=3, K=8, seed=0)
    assert cb.levels.shape == (3, 8, 6)
    # mean residual norm after each extra level must not grow
    errs = []
    r = x.copy()
    for lvl in range(3):
        tok = rq_assign_batch(Codebook(levels=cb.levels[:lvl + 1]), x)
        q = sum(cb.levels[j][tok[:, j]] for j in range(lvl + 1))
        errs.append(float(np.mean(np.linalg.norm(x - q, axis=1))))
    assert errs[0] >= errs[1] >= errs[2]


def test_rq_kmeans_k_too_large_names_level():
    with pytest.raises(ConfigurationError, match="level 1"):
        rq_kmeans_fit(np.zeros((4, 2)), L=2, K=8, seed=0)


def test_rq_assign_matches_oracle(rng):
    levels = rng.normal(size=(3, 7, 5))
    cb = Codebook(levels=levels)
    for _ in range(50):
        v = rng.normal(size=5)
        tokens, norms = rq_assign(cb, v)
        otok, onorm = _oracle_assign(levels, v)
        np.testing.assert_array_equal(tokens, otok)
        np.testing.assert_allclose(norms, onorm)


def test_rq_assign_tie_lowest_index():
    levels = np.zeros((1, 3, 2))
    levels[0, 1] = [1.0, 0.0]
    levels[0, 2] = [1.0, 0.0]  # duplicate of index 1
    tokens, _ = rq_assign(Codebook(levels=levels), np.array([1.0, 0.0]))
    assert tokens[0] == 1


def test_rq_assign_shape_error():
    cb = Codebook(levels=np.zeros((1, 2, 3)))
    with pytest.raises(ShapeError):
        rq_assign(cb, np.zeros(4))


def test_rq_assign_batch_matches_single(rng):
    cb = Codebook(levels=rng.normal(size=(2, 4, 3)))
    x = rng.normal(size=(20, 3))
    batch = rq_assign_batch(cb, x)
    for i in range(20):
        np.testing.assert_array_equal(batch[i], rq_assign(cb, x[i])[0])


def test_quantize_sums_codewords(rng):
    cb = Codebook(levels=rng.normal(size=(2, 4, 3)))
    x = rng.normal(size=(10, 3))
    q, tokens = quantize(cb, x)
    for i in range(10):
        want = cb.levels[0][tokens[i, 0]] + cb.levels[1][tokens[i, 1]]
        np.testing.assert_allclose(q[i], want)
        _, norms = rq_assign(cb, x[i])
        assert np.isclose(np.linalg.norm(x[i] - q[i]), norms[-1])


def test_rqvae_config_validation():
    for bad in (RqVaeConfig(beta=-1.0), RqVaeConfig(ema_decay=0.0),
                RqVaeConfig(ema_decay=1.0), RqVaeConfig(epochs=-1)):
        with pytest.raises(ConfigurationError):
            bad.validate()


def _tiny_vae(rng, n=40, feat=6, d=4, K=3, L=2):
    x = rng.normal(size=(n, feat))
    r = np.random.default_rng(0)
    encoder = numkit.mlp_init([feat, 8, d], r)
    decoder = numkit.mlp_init([d, 8, feat], r)
    codebook = Codebook(levels=r.normal(size=(L, K, d)))
    return x, RqVaeModel(encoder=encoder, decoder=decoder,
                         codebook=codebook, beta=0.25)


def test_rqvae_loss_value_oracle(rng):
    x, model = _tiny_vae(rng)
    loss, _, _, z, tokens = rq_vae_loss_grads(model, x)
    q, tok2 = quantize(model.codebook, z)
    np.testing.assert_array_equal(tokens, tok2)
    xhat, _ = numkit.mlp_apply(model.decoder, q)
    recon = np.mean(np.sum((x - xhat) ** 2, axis=1))
    commit, r = 0.0, z.copy()
    for lvl in range(model.codebook.L):
        r = r - model.codebook.levels[lvl][tokens[:, lvl]]
        commit += np.mean(np.sum(r ** 2, axis=1))
    assert np.isclose(loss, recon + model.beta * commit)


def test_rqvae_straight_through_gradient_finite_difference(rng):
    # the straight-through estimator is the exact gradient of a frozen
    # surrogate: quantization offsets and token assignments held constant
    x, model = _tiny_vae(rng, n=12)
    _, enc_g, dec_g, z0, tokens0 = rq_vae_loss_grads(model, x)
    delta = quantize(model.codebook, z0)[0] - z0
    cums = np.cumsum(
        np.stack([model.codebook.levels[l][tokens0[:, l]]
                  for l in range(model.codebook.L)]), axis=0)
    n = x.shape[0]

    def surrogate(params):
        n_enc = len(model.encoder.flat())
        model.encoder.set_flat(params[:n_enc])
        model.decoder.set_flat(params[n_enc:])
        z, _ = numkit.mlp_apply(model.encoder, x)
        xhat, _ = numkit.mlp_apply(model.decoder, z + delta)
        loss = np.mean(np.sum((x - xhat) ** 2, axis=1))
        for lvl in range(model.codebook.L):
            loss += model.beta * np.mean(
                np.sum((z - cums[lvl]) ** 2, axis=1))
        _, eg, dg, _, _ = rq_vae_loss_grads(model, x)
        return float(loss), eg + dg

    params = model.encoder.flat() + model.decoder.flat()
    report = numkit.finite_diff_check(surrogate, params, h=1e-5,
                                      tolerance=1e-5,
                                      max_coords_per_param=10, rng=rng)
    assert report.passed, report


def test_ema_update_moves_codeword_toward_points():
    cb = Codebook(levels=np.zeros((1, 2, 2)))
    cb.levels[0, 1] = [10.0, 10.0]
    z = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    tokens = np.zeros((4, 1), dtype=np.int64)
    counts = np.ones((1, 2))
    sums = cb.levels.copy()
    before = cb.levels[0, 0].copy()
    _ema_update(cb, z, tokens, counts, sums, decay=0.5)
    # codeword 0 moves toward the mean of its assigned points (1, 1)
    assert np.all(cb.levels[0, 0] > before)
    assert np.all(cb.levels[0, 0] < 1.0)
    # untouched codeword 1 stays put (count decays but sum/count is fixed)
    np.testing.assert_allclose(cb.levels[0, 1], [10.0, 10.0])


def test_rqvae_fit_deterministic_and_decreasing(rng):
    x = rng.normal(size=(96, 6))
    cfg = RqVaeConfig(L=2, K=4, d=4, epochs=8, batch_size=32, seed=5,
                      hidden=8)
    m1, l1 = rq_vae_fit(x, cfg)
    m2, l2 = rq_vae_fit(x, cfg)
    assert l1 == l2
    for a, b in zip(m1.encoder.flat() + m1.decoder.flat(),
                    m2.encoder.flat() + m2.decoder.flat()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(m1.codebook.levels, m2.codebook.levels)
    steps = len(l1) // cfg.epochs
    assert np.mean(l1[-steps:]) < np.mean(l1[:steps])


def test_rqvae_fit_zero_epochs_still_seeds_codebook(rng):
    x = rng.normal(size=(40, 6))
    model, losses = rq_vae_fit(x, RqVaeConfig(L=2, K=4, d=4, epochs=0,
                                              hidden=8))
    assert losses == []
    assert model.codebook.levels.shape == (2, 4, 4)
    assert np.all(np.isfinite(model.codebook.levels))
