"""Minimal deterministic numeric kernel: dense MLPs with hand-written
gradients, a bias-corrected adaptive-moment optimizer, a finite-difference
gradient checker, and k-means with k-means++ seeding.

All functions are pure with respect to (inputs, seed); ties in argmax /
nearest-centroid are always broken toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError

RELU = "relu"
IDENTITY = "identity"


@dataclass
class MlpParams:
    """A feed-forward net: weights[i] is (fan_in, fan_out), biases[i] is
    (fan_out,), activations[i] in {"relu", "identity"}.  The final layer
    must use the identity activation."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("layer lists must have equal length")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeError(f"bad layer shapes {w.shape} / {b.shape}")
        for wa, wb in zip(self.weights, self.weights[1:]):
            if wa.shape[1] != wb.shape[0]:
                raise ShapeError("consecutive layer dims do not chain")
        if self.activations and self.activations[-1] != IDENTITY:
            raise ConfigurationError("final layer must be identity")
        for a in self.activations:
            if a not in (RELU, IDENTITY):
                raise ConfigurationError(f"unknown activation {a!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def flat(self) -> list[np.ndarray]:
        """Parameter arrays in declared order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_flat(self, arrays: list[np.ndarray]) -> None:
        n = len(self.weights)
        if len(arrays) != 2 * n:
            raise ShapeError("wrong number of parameter arrays")
        for i in range(n):
            if arrays[2 * i].shape != self.weights[i].shape:
                raise ShapeError("weight shape mismatch")
            if arrays[2 * i + 1].shape != self.biases[i].shape:
                raise ShapeError("bias shape mismatch")
            self.weights[i] = arrays[2 * i]
            self.biases[i] = arrays[2 * i + 1]


def quantize_f32(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value (kept as float64).

    Trained parameters live on the float32 grid so binary checkpoints
    (stored as little-endian float32) round-trip bit-exactly.
    """
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def mlp_init(dims: list[int], rng: np.random.Generator,
             hidden_activation: str = RELU) -> MlpParams:
    """Uniform +-1/sqrt(fan_in) init, quantized to the float32 grid."""
    weights, biases, acts = [], [], []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / np.sqrt(din)
        weights.append(quantize_f32(rng.uniform(-bound, bound, size=(din, dout))))
        biases.append(quantize_f32(rng.uniform(-bound, bound, size=dout)))
        acts.append(IDENTITY if i == len(dims) - 2 else hidden_activation)
    return MlpParams(weights, biases, acts)


def mlp_apply(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass over a batch (n, in_dim).  Returns (output, cache);
    the cache holds the layer inputs needed for exact gradients."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[1]} != {params.in_dim}")
    cache = []
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        pre = h @ w + b
        cache.append((h, pre))
        h = np.maximum(pre, 0.0) if act == RELU else pre
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite MLP output")
    return h, cache


def mlp_grad(params: MlpParams, cache: list,
             upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Backward pass.  Returns (flat parameter gradients matching
    params.flat() order, gradient w.r.t. the input batch)."""
    if len(cache) != len(params.weights):
        raise ShapeError("cache does not match network depth")
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))
    for i in range(len(params.weights) - 1, -1, -1):
        inp, pre = cache[i]
        if params.activations[i] == RELU:
            g = g * (pre > 0.0)
        grads[2 * i] = inp.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, g


@dataclass
class AdamState:
    """Per-array first/second moments plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params],
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected update.  Returns new parameter arrays; the
    moment buffers in `state` are advanced in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("parameter / gradient count mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        mhat = state.m[i] / (1 - state.beta1 ** t)
        vhat = state.v[i] / (1 - state.beta2 ** t)
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_coord: int
    passed: bool


def finite_diff_check(loss_and_grad, params: list[np.ndarray],
                      h: float = 1e-4, tolerance: float = 1e-4,
                      max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_and_grad(params)` must return (scalar loss, gradient list).
    Relative error uses max(|fd|, |grad|, 1) as the scale so near-zero
    coordinates are judged absolutely.
    """
    _, grads = loss_and_grad(params)
    worst = (0.0, -1, -1)
    for pi, p in enumerate(params):
        n = p.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        flat = p.reshape(-1)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            lo_plus, _ = loss_and_grad(params)
            flat[ci] = orig - h
            lo_minus, _ = loss_and_grad(params)
            flat[ci] = orig
            fd = (lo_plus - lo_minus) / (2 * h)
            g = grads[pi].reshape(-1)[ci]
            rel = abs(fd - g) / max(abs(fd), abs(g), 1.0)
            if rel > worst[0]:
                worst = (rel, pi, int(ci))
    return GradCheckReport(max_rel_error=worst[0], worst_param=worst[1],
                           worst_coord=worst[2], passed=worst[0] < tolerance)


def _kmeans_pp_init(points: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding via inverse-CDF draws (stable under point
    duplication)."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.random() * n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen centroid
            centroids[j] = points[int(rng.random() * n)]
            continue
        cum = np.cumsum(d2 / total)
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        idx = min(idx, n - 1)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans_fit(points: np.ndarray, k: int, iterations: int = 50,
               seed: int = 0, n_init: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding and `n_init` seeded
    restarts (best objective wins, first winner kept on ties).

    Ties in the nearest-centroid assignment go to the lowest centroid
    index; empty clusters are re-seeded to the farthest point.
    Returns (centroids (k, d), assignments (n,)).
    """
    points = np.asarray(points, dtype=np.float64)
    if k > points.shape[0]:
        raise ConfigurationError(
            f"K={k} exceeds number of points {points.shape[0]}")
    if k <= 0:
        raise ConfigurationError("K must be positive")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centroids, assign = _kmeans_single(points, k, iterations, rng)
        obj = kmeans_objective(points, centroids, assign)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, centroids, assign)
    return best[1], best[2]


def _kmeans_single(points: np.ndarray, k: int, iterations: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = points.shape[0]
    centroids = _kmeans_pp_init(points, k, rng)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)  # argmin takes the lowest index
        for j in range(k):
            mask = new_assign == j
            if mask.any():
                centroids[j] = points[mask].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(n), new_assign]))
                centroids[j] = points[far]
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    return centroids, assign


def kmeans_objective(points: np.ndarray, centroids: np.ndarray,
                     assign: np.ndarray) -> float:
    return float(np.sum((points - centroids[assign]) ** 2))
