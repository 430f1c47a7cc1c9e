"""Deterministic summary stage plus the reconstruction pathway.

A fixed template maps an item's category path to a short token sequence
(the stand-in for an attribute summary), and a small head + per-position
decoder learns to reproduce that sequence from the SID logits and item
embedding.  The summary carries label-derived semantics (leaf identity,
latent trait tokens) that are absent from the continuous feature blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .catalog import CategoryTree, Item
from .errors import CatalogError, ConfigurationError, InputError, ShapeError
from .numkit import MlpParams

SUMMARY_LEN = 8          # tokens per summary, end marker included
TRAIT_COUNT = 16
BOS_ID = 0
EOS_ID = 1
MAX_VOCAB = 128

_GLUE = ["for", "shoppers"]
_INDUSTRY = "industry:general-ecommerce"


@dataclass
class SummaryVocab:
    tokens: list[str]
    index: dict[str, int]

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise CatalogError(f"unknown summary token {token!r}")


def build_vocab(tree: CategoryTree) -> SummaryVocab:
    tokens = ["<bos>", "<eos>"]
    tokens += [f"glue:{g}" for g in _GLUE]
    tokens.append(_INDUSTRY)
    tokens += [f"cat:{name}" for name in tree.names[1]]
    tokens += [f"trait:{i:02d}" for i in range(TRAIT_COUNT)]
    tokens += [f"content:{name}" for name in tree.names[3]]
    if len(tokens) > MAX_VOCAB:
        raise ConfigurationError(
            f"summary vocab size {len(tokens)} exceeds {MAX_VOCAB}; "
            "reduce the category tree")
    return SummaryVocab(tokens=tokens, index={t: i for i, t in enumerate(tokens)})


def trait_a(leaf: int) -> int:
    # affine map, injective mod 16, so sibling leaves get distinct traits
    return (leaf * 5 + 3) % TRAIT_COUNT


def trait_b(l2: int) -> int:
    return (l2 * 7 + 1) % TRAIT_COUNT


def summarize(item: Item, tree: CategoryTree,
              vocab: SummaryVocab | None = None) -> np.ndarray:
    """Template: content(c3), industry, level-1 name(c1), trait-A(c3),
    trait-B(c2), two glue tokens, end marker.  Length SUMMARY_LEN."""
    if vocab is None:
        vocab = build_vocab(tree)
    c1, c2, c3 = item.labels
    if not (0 <= c3 < len(tree.names[3]) and 0 <= c1 < len(tree.names[1])
            and 0 <= c2 < len(tree.names[2])):
        raise CatalogError(f"labels {item.labels} not in tree")
    seq = [
        vocab.id_of(f"content:{tree.names[3][c3]}"),
        vocab.id_of(_INDUSTRY),
        vocab.id_of(f"cat:{tree.names[1][c1]}"),
        vocab.id_of(f"trait:{trait_a(c3):02d}"),
        vocab.id_of(f"trait:{trait_b(c2):02d}"),
        vocab.id_of(f"glue:{_GLUE[0]}"),
        vocab.id_of(f"glue:{_GLUE[1]}"),
        EOS_ID,
    ]
    return np.array(seq, dtype=np.int64)


@dataclass
class ReconPipeline:
    """recon_head: (L*K + d_e) -> d_r; decoder scores the next token from
    the conditioning state plus a fixed-length one-hot prefix encoding."""

    recon_head: MlpParams
    decoder: MlpParams   # (d_r + SUMMARY_LEN * vocab) -> vocab
    vocab: SummaryVocab
    d_r: int

    def __post_init__(self):
        v = len(self.vocab)
        expect = self.d_r + SUMMARY_LEN * v
        if self.decoder.in_dim != expect:
            raise ShapeError(
                f"decoder input dim {self.decoder.in_dim} != {expect}")
        if self.decoder.out_dim != v:
            raise ShapeError("decoder output dim must equal vocab size")


def init_pipeline(L: int, K: int, d_e: int, d_r: int, vocab: SummaryVocab,
                  seed: int, decoder_hidden: int = 64) -> ReconPipeline:
    rng = np.random.default_rng(seed)
    v = len(vocab)
    recon_head = numkit.mlp_init([L * K + d_e, d_r], rng)
    decoder = numkit.mlp_init([d_r + SUMMARY_LEN * v, decoder_hidden, v], rng)
    return ReconPipeline(recon_head=recon_head, decoder=decoder,
                         vocab=vocab, d_r=d_r)


def recon_state(logits: np.ndarray, emb: np.ndarray,
                pipeline: ReconPipeline) -> tuple[np.ndarray, list]:
    """h_rec = recon_head(concat(flattened logits, embedding)); the cache
    supports exact gradients back to both inputs."""
    logits = np.asarray(logits, dtype=np.float64)
    emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    flat = logits.reshape(emb.shape[0], -1)
    x = np.concatenate([flat, emb], axis=1)
    return numkit.mlp_apply(pipeline.recon_head, x)


def _prefix_encoding(prefix: np.ndarray, v: int) -> np.ndarray:
    """(n, t) token prefix -> (n, SUMMARY_LEN * v) one-hots, later
    positions zero."""
    n, t = prefix.shape
    out = np.zeros((n, SUMMARY_LEN * v), dtype=np.float64)
    if t:
        rows = np.repeat(np.arange(n), t)
        cols = (np.arange(t) * v)[None, :] + prefix
        out[rows, cols.reshape(-1)] = 1.0
    return out


def recon_loss(h_rec: np.ndarray, targets: np.ndarray,
               pipeline: ReconPipeline):
    """Teacher-forced cross-entropy over all positions, averaged over the
    batch.  Returns (loss, grad w.r.t. h_rec, flat decoder gradients)."""
    h_rec = np.atleast_2d(np.asarray(h_rec, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    v = len(pipeline.vocab)
    if targets.shape[1] != SUMMARY_LEN:
        raise InputError(f"target length must be {SUMMARY_LEN}")
    if targets.min() < 0 or targets.max() >= v:
        raise InputError("target token out of vocabulary")
    n = h_rec.shape[0]
    loss = 0.0
    g_h = np.zeros_like(h_rec)
    dec_grads = [np.zeros_like(p) for p in pipeline.decoder.flat()]
    for t in range(SUMMARY_LEN):
        x = np.concatenate([h_rec, _prefix_encoding(targets[:, :t], v)], axis=1)
        logits, cache = numkit.mlp_apply(pipeline.decoder, x)
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        tok = targets[:, t]
        loss += float(np.mean(lse - logits[np.arange(n), tok]))
        soft = np.exp(logits - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), tok] -= 1.0
        grads, gx = numkit.mlp_grad(pipeline.decoder, cache, soft / n)
        for i, g in enumerate(grads):
            dec_grads[i] += g
        g_h += gx[:, :pipeline.d_r]
    return loss, g_h, dec_grads


def decode_summary(h_rec: np.ndarray, pipeline: ReconPipeline) -> np.ndarray:
    """Greedy teacher-free decoding; stops at the end marker or
    SUMMARY_LEN tokens."""
    h_rec = np.atleast_2d(np.asarray(h_rec, dtype=np.float64))
    n = h_rec.shape[0]
    v = len(pipeline.vocab)
    prefix = np.zeros((n, 0), dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(SUMMARY_LEN):
        x = np.concatenate([h_rec, _prefix_encoding(prefix, v)], axis=1)
        logits, _ = numkit.mlp_apply(pipeline.decoder, x)
        tok = np.argmax(logits, axis=1)
        tok[done] = EOS_ID
        prefix = np.concatenate([prefix, tok[:, None]], axis=1)
        done |= tok == EOS_ID
    return prefix


def summary_text(tokens: np.ndarray, vocab: SummaryVocab) -> str:
    out = []
    for t in tokens:
        out.append(vocab.tokens[int(t)])
        if t == EOS_ID:
            break
    return " ".join(out)
