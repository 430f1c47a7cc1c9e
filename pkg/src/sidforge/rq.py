"""Two-stage residual-quantization baselines: RQ-KMeans over fixed
embeddings, and an RQ-VAE with straight-through gradients and
exponential-moving-average codebook updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ConfigurationError, NumericError, ShapeError
from .numkit import MlpParams


@dataclass
class Codebook:
    """levels[l] holds K codewords of dimension d: shape (L, K, d)."""

    levels: np.ndarray

    def __post_init__(self):
        if self.levels.ndim != 3:
            raise ShapeError("codebook must be (L, K, d)")
        if not np.all(np.isfinite(self.levels)):
            raise NumericError("non-finite codeword")

    @property
    def L(self) -> int:
        return self.levels.shape[0]

    @property
    def K(self) -> int:
        return self.levels.shape[1]

    @property
    def dim(self) -> int:
        return self.levels.shape[2]


def rq_kmeans_fit(embeddings: np.ndarray, L: int, K: int, seed: int,
                  iterations: int = 50) -> Codebook:
    """Level 1 clusters the embeddings; each further level clusters the
    residuals left by the previous level's assigned centroids."""
    x = np.asarray(embeddings, dtype=np.float64)
    levels = np.empty((L, K, x.shape[1]), dtype=np.float64)
    residual = x
    for lvl in range(L):
        try:
            centroids, assign = numkit.kmeans_fit(residual, K,
                                                  iterations=iterations,
                                                  seed=seed + lvl)
        except ConfigurationError as e:
            raise ConfigurationError(f"level {lvl + 1}: {e}") from e
        levels[lvl] = centroids
        residual = residual - centroids[assign]
    return Codebook(levels=levels)


def rq_assign(codebook: Codebook,
              v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy per-level nearest-codeword assignment with residual update.

    Returns (tokens (L,), residual norms (L+1,) starting at ||v||).
    Nearest-codeword ties go to the lowest index.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (codebook.dim,):
        raise ShapeError(f"vector dim {v.shape} != ({codebook.dim},)")
    tokens = np.empty(codebook.L, dtype=np.int64)
    norms = np.empty(codebook.L + 1, dtype=np.float64)
    r = v
    for lvl in range(codebook.L):
        norms[lvl] = np.linalg.norm(r)
        d2 = np.sum((codebook.levels[lvl] - r) ** 2, axis=1)
        tokens[lvl] = int(np.argmin(d2))
        r = r - codebook.levels[lvl, tokens[lvl]]
    norms[codebook.L] = np.linalg.norm(r)
    return tokens, norms


def rq_assign_batch(codebook: Codebook, x: np.ndarray) -> np.ndarray:
    """(n, d) -> (n, L) token matrix."""
    x = np.asarray(x, dtype=np.float64)
    tokens = np.empty((x.shape[0], codebook.L), dtype=np.int64)
    r = x.copy()
    for lvl in range(codebook.L):
        d2 = np.sum((r[:, None, :] - codebook.levels[lvl][None, :, :]) ** 2,
                    axis=2)
        tokens[:, lvl] = np.argmin(d2, axis=1)
        r -= codebook.levels[lvl][tokens[:, lvl]]
    return tokens


def quantize(codebook: Codebook, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum of assigned codewords per point; returns (q, tokens)."""
    tokens = rq_assign_batch(codebook, x)
    q = np.zeros_like(np.asarray(x, dtype=np.float64))
    for lvl in range(codebook.L):
        q += codebook.levels[lvl][tokens[:, lvl]]
    return q, tokens


@dataclass(frozen=True)
class RqVaeConfig:
    L: int = 3
    K: int = 16
    d: int = 32
    beta: float = 0.25
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    ema_decay: float = 0.99
    hidden: int = 64

    def validate(self) -> None:
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must be in (0, 1)")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")


@dataclass
class RqVaeModel:
    encoder: MlpParams
    decoder: MlpParams
    codebook: Codebook
    beta: float


def rq_vae_loss_grads(model: RqVaeModel, x: np.ndarray):
    """One training-step loss with straight-through gradients.

    loss = mean ||x - dec(q(enc(x)))||^2 + beta * mean sum_l ||r^{l+1}||^2
    with the quantization treated as identity for the reconstruction
    gradient and the codewords treated as constants for the commitment
    term.  Returns (loss, enc grads, dec grads, z, tokens).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    z, enc_cache = numkit.mlp_apply(model.encoder, x)
    q, tokens = quantize(model.codebook, z)
    xhat, dec_cache = numkit.mlp_apply(model.decoder, q)
    recon = float(np.mean(np.sum((x - xhat) ** 2, axis=1)))
    # commitment: residual after each level, codewords stop-gradiented
    commit = 0.0
    g_commit = np.zeros_like(z)
    r = z.copy()
    for lvl in range(model.codebook.L):
        r = r - model.codebook.levels[lvl][tokens[:, lvl]]
        commit += float(np.mean(np.sum(r ** 2, axis=1)))
        g_commit += 2.0 * r / n
    loss = recon + model.beta * commit
    dec_grads, g_q = numkit.mlp_grad(model.decoder, dec_cache,
                                     2.0 * (xhat - x) / n)
    g_z = g_q + model.beta * g_commit  # straight-through copy
    enc_grads, _ = numkit.mlp_grad(model.encoder, enc_cache, g_z)
    return loss, enc_grads, dec_grads, z, tokens


def _ema_update(codebook: Codebook, z: np.ndarray, tokens: np.ndarray,
                counts: np.ndarray, sums: np.ndarray, decay: float) -> None:
    """EMA codeword update, level by level over the level's residual
    inputs."""
    r = z.copy()
    for lvl in range(codebook.L):
        for k in range(codebook.K):
            mask = tokens[:, lvl] == k
            counts[lvl, k] = decay * counts[lvl, k] + (1 - decay) * mask.sum()
            sums[lvl, k] = (decay * sums[lvl, k]
                            + (1 - decay) * r[mask].sum(axis=0))
            if counts[lvl, k] > 1e-8:
                codebook.levels[lvl, k] = sums[lvl, k] / counts[lvl, k]
        r = r - codebook.levels[lvl][tokens[:, lvl]]


def rq_vae_fit(features: np.ndarray, config: RqVaeConfig
               ) -> tuple[RqVaeModel, list[float]]:
    """Trains the autoencoder by gradient descent and the codebooks by
    EMA; codebooks are initialized from RQ-KMeans on the first encodings.
    Deterministic given (features, config)."""
    config.validate()
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    encoder = numkit.mlp_init([x.shape[1], config.hidden, config.d], rng)
    decoder = numkit.mlp_init([config.d, config.hidden, x.shape[1]], rng)
    z0, _ = numkit.mlp_apply(encoder, x)
    codebook = rq_kmeans_fit(z0, config.L, config.K, seed=config.seed)
    model = RqVaeModel(encoder=encoder, decoder=decoder,
                       codebook=codebook, beta=config.beta)

    params = encoder.flat() + decoder.flat()
    opt = numkit.adam_init(params, lr=config.lr)
    counts = np.ones((config.L, config.K), dtype=np.float64)
    sums = codebook.levels.copy()
    losses = []
    n_enc = len(encoder.flat())
    for epoch in range(config.epochs):
        perm = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], config.batch_size):
            batch = x[perm[start:start + config.batch_size]]
            if batch.shape[0] == 0:
                continue
            loss, enc_g, dec_g, z, tokens = rq_vae_loss_grads(model, batch)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite RQ-VAE loss at epoch {epoch}, step "
                    f"{start // config.batch_size}")
            params = numkit.adam_step(opt, params, enc_g + dec_g)
            params = [numkit.quantize_f32(p) for p in params]
            encoder.set_flat(params[:n_enc])
            decoder.set_flat(params[n_enc:])
            _ema_update(model.codebook, z, tokens, counts, sums,
                        config.ema_decay)
            losses.append(float(loss))
    return model, losses
