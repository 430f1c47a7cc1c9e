"""Training objectives for the unified model: the per-level contrastive
loss over SID logit blocks, the embedding contrastive loss, the weighted
total, and the joint end-to-end training loop.  All gradients are
analytic and checked against finite differences in the test suite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numkit, summarizer, unisid
from .catalog import ItemCatalog, build_positive_sets
from .errors import ConfigurationError, InputError, NumericError
from .summarizer import ReconPipeline
from .unisid import UniSidConfig, UniSidModel


@dataclass
class ContrastBatch:
    """Per-level positive sets (batch positions), embedding positive
    pairing (-1 = no same-leaf mate, query skipped), temperature."""

    ids: list[int]
    level_pos: list[list[np.ndarray]]
    emb_pos: np.ndarray
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("temperature must be positive")


def make_contrast_batch(catalog: ItemCatalog, batch_ids: list[int],
                        tau: float) -> ContrastBatch:
    gp = build_positive_sets(catalog, batch_ids)
    # positives must nest: anything positive at level l+1 is positive at l
    for lvl in range(len(gp.positives) - 1):
        for i in range(len(batch_ids)):
            finer = set(gp.positives[lvl + 1][i].tolist())
            if not finer <= set(gp.positives[lvl][i].tolist()):
                raise InputError("positive sets do not nest")
    n = len(batch_ids)
    emb_pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        mates = gp.positives[-1][i]  # same-leaf batch mates
        if len(mates):
            # deterministic pairing: the mate with the lowest item id
            emb_pos[i] = mates[int(np.argmin([batch_ids[m] for m in mates]))]
    return ContrastBatch(ids=list(batch_ids), level_pos=gp.positives,
                         emb_pos=emb_pos, tau=tau)


def _normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm vector: cosine similarity undefined")
    return z / norms[:, None], norms


def _cosine_backprop(g_sim: np.ndarray, zh: np.ndarray,
                     norms: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. the cosine matrix (zero diagonal) back to the
    raw vectors."""
    u = (g_sim + g_sim.T) @ zh
    radial = np.sum(u * zh, axis=1, keepdims=True)
    return (u - radial * zh) / norms[:, None]


def _infonce(sim: np.ndarray, tau: float, pos_sets: list[np.ndarray],
             cand_sets: list[np.ndarray] | None = None):
    """Supervised InfoNCE over one similarity matrix.

    Per query i with positives P and candidates A (default: everyone but
    i): loss_i = logsumexp_A(s/tau) - mean_P(s/tau).  Queries with empty
    P are skipped.  Returns (sum of query losses, gradient w.r.t. sim,
    number of contributing queries).
    """
    n = sim.shape[0]
    g = np.zeros_like(sim)
    total = 0.0
    n_valid = 0
    everyone = np.arange(n)
    for i in range(n):
        pos = pos_sets[i]
        if len(pos) == 0:
            continue
        cand = cand_sets[i] if cand_sets is not None else everyone[everyone != i]
        logits = sim[i, cand] / tau
        m = logits.max()
        lse = m + np.log(np.exp(logits - m).sum())
        total += lse - float(np.mean(sim[i, pos])) / tau
        g[i, cand] += np.exp(logits - lse) / tau
        g[i, pos] -= 1.0 / (len(pos) * tau)
        n_valid += 1
    return total, g, n_valid


def mg_contrastive_loss(level_logits: np.ndarray,
                        batch: ContrastBatch) -> tuple[float, np.ndarray]:
    """Multi-granularity contrastive loss over (n, L, K) logit blocks.

    Averages per-query terms within each level (queries with no positive
    at that level are excluded from that level's average), then averages
    over levels.  Returns (loss, gradient of the same shape).
    """
    level_logits = np.asarray(level_logits, dtype=np.float64)
    n, L, K = level_logits.shape
    if len(batch.level_pos) != L:
        raise InputError("positive sets do not match level count")
    grad = np.zeros_like(level_logits)
    loss = 0.0
    for lvl in range(L):
        z = level_logits[:, lvl, :]
        zh, norms = _normalize_rows(z)
        sim = zh @ zh.T
        lsum, g_sim, n_valid = _infonce(sim, batch.tau, batch.level_pos[lvl])
        if n_valid == 0:
            continue
        loss += lsum / (n_valid * L)
        grad[:, lvl, :] = _cosine_backprop(g_sim / (n_valid * L), zh, norms)
    return loss, grad


def emb_contrastive_loss(embeddings: np.ndarray,
                         batch: ContrastBatch) -> tuple[float, np.ndarray]:
    """Embedding contrastive loss: one same-leaf positive per query, the
    rest of the batch as negatives; the softmax denominator includes the
    positive.  Queries without a mate are skipped; an all-skipped batch
    is an error."""
    z = np.asarray(embeddings, dtype=np.float64)
    pos_sets = [np.array([j]) if j >= 0 else np.empty(0, dtype=np.int64)
                for j in batch.emb_pos]
    if all(len(p) == 0 for p in pos_sets):
        raise InputError("no query has a same-leaf mate in this batch")
    zh, norms = _normalize_rows(z)
    sim = zh @ zh.T
    lsum, g_sim, n_valid = _infonce(sim, batch.tau, pos_sets)
    return lsum / n_valid, _cosine_backprop(g_sim / n_valid, zh, norms)


def total_loss(l_sid: float, l_emb: float, l_rec: float, lam: float) -> float:
    for name, v in (("l_sid", l_sid), ("l_emb", l_emb), ("l_rec", l_rec)):
        if not np.isfinite(v):
            raise NumericError(f"non-finite component {name}")
    return l_sid + l_emb + lam * l_rec


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    tau: float = 0.07
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    L: int = 3
    K: int = 16
    d_h: int = 64
    d_e: int = 32
    d_r: int = 32
    use_sid: bool = True
    use_emb: bool = True
    decoder_frozen_after_warmup: bool = True
    decoder_warmup_epochs: int | None = None  # default: half the epochs

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch size must be >= 2")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")

    @property
    def warmup(self) -> int:
        if self.decoder_warmup_epochs is not None:
            return self.decoder_warmup_epochs
        return max(1, self.epochs // 2)


@dataclass
class LossReport:
    steps: list[tuple[float, float, float, float]] = field(default_factory=list)

    def record(self, l_sid, l_emb, l_rec, l_total):
        self.steps.append((float(l_sid), float(l_emb),
                           float(l_rec), float(l_total)))

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "L_sid", "L_emb", "L_rec", "L_total"])
            for i, row in enumerate(self.steps):
                w.writerow([i] + [f"{v:.9g}" for v in row])

    def epoch_means(self, steps_per_epoch: int) -> list[float]:
        totals = [r[3] for r in self.steps]
        return [float(np.mean(totals[i:i + steps_per_epoch]))
                for i in range(0, len(totals), steps_per_epoch)]


def train_unisid(catalog: ItemCatalog, config: TrainConfig
                 ) -> tuple[UniSidModel, ReconPipeline, LossReport]:
    """Joint training of the unified model and reconstruction pipeline.

    Deterministic given (catalog, config): seeded init, seeded epoch
    shuffles, fixed-order gradient accumulation, parameters kept on the
    float32 grid after every optimizer step.
    """
    config.validate()
    spec = catalog.spec
    model = unisid.init_model(spec.feature_dim,
                              UniSidConfig(config.L, config.K,
                                           config.d_h, config.d_e),
                              config.seed)
    vocab = summarizer.build_vocab(catalog.tree)
    pipeline = summarizer.init_pipeline(config.L, config.K, config.d_e,
                                        config.d_r, vocab, config.seed + 1)
    targets = np.stack([summarizer.summarize(it, catalog.tree, vocab)
                        for it in catalog.items])

    base_mlps = [model.encoder, model.sid_head, model.emb_head,
                 pipeline.recon_head]
    base_params = [p for m in base_mlps for p in m.flat()]
    opt = numkit.adam_init(base_params, lr=config.lr)
    opt_dec = numkit.adam_init(pipeline.decoder.flat(), lr=config.lr)

    rng = np.random.default_rng(config.seed)
    report = LossReport()
    n_lk = config.L * config.K
    for epoch in range(config.epochs):
        train_decoder = (not config.decoder_frozen_after_warmup
                         or epoch < config.warmup) and config.lam > 0
        perm = rng.permutation(len(catalog.train_ids))
        order = [catalog.train_ids[i] for i in perm]
        for start in range(0, len(order), config.batch_size):
            ids = order[start:start + config.batch_size]
            if len(ids) < 2:
                continue
            x = catalog.features_matrix(ids)
            fp = unisid.forward_batch(model, x)
            cb = make_contrast_batch(catalog, ids, config.tau)

            if config.use_sid:
                l_sid, g_logits = mg_contrastive_loss(fp.logits, cb)
            else:
                l_sid, g_logits = 0.0, np.zeros_like(fp.logits)
            if config.use_emb and np.any(cb.emb_pos >= 0):
                l_emb, g_emb = emb_contrastive_loss(fp.embedding, cb)
            else:
                l_emb, g_emb = 0.0, np.zeros_like(fp.embedding)

            h_rec, rcache = summarizer.recon_state(fp.logits, fp.embedding,
                                                   pipeline)
            l_rec, g_h, dec_grads = summarizer.recon_loss(
                h_rec, targets[ids], pipeline)
            l_total = total_loss(l_sid, l_emb, l_rec, config.lam)

            rec_grads, g_rin = numkit.mlp_grad(pipeline.recon_head, rcache,
                                               config.lam * g_h)
            g_logits_flat = (g_logits.reshape(len(ids), n_lk)
                             + g_rin[:, :n_lk])
            sid_grads, g_hidden = numkit.mlp_grad(model.sid_head,
                                                  fp.sid_cache, g_logits_flat)
            g_emb_total = g_emb + g_rin[:, n_lk:]
            emb_grads, g_emb_in = numkit.mlp_grad(model.emb_head,
                                                  fp.emb_cache, g_emb_total)
            # the one-hot token path is non-differentiable; only the
            # hidden-state slice propagates to the encoder
            g_hidden = g_hidden + g_emb_in[:, :config.d_h]
            enc_grads, _ = numkit.mlp_grad(model.encoder, fp.enc_cache,
                                           g_hidden)

            grads = enc_grads + sid_grads + emb_grads + rec_grads
            base_params = numkit.adam_step(opt, base_params, grads)
            base_params = [numkit.quantize_f32(p) for p in base_params]
            k = 0
            for m in base_mlps:
                cnt = len(m.flat())
                m.set_flat(base_params[k:k + cnt])
                k += cnt

            if train_decoder:
                dec_params = numkit.adam_step(
                    opt_dec, pipeline.decoder.flat(),
                    [config.lam * g for g in dec_grads])
                pipeline.decoder.set_flat(
                    [numkit.quantize_f32(p) for p in dec_params])

            report.record(l_sid, l_emb, l_rec, l_total)
    return model, pipeline, report
