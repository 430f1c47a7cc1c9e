"""Evaluation suite: entropy-based V-measure over SID prefixes, a compact
next-SID sequence model with beam-search Hit-Rate, sampled-negative
embedding retrieval recall, and SID collision statistics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .catalog import ItemCatalog
from .errors import ConfigurationError, InputError
from .numkit import MlpParams
from .unisid import UniSidModel, collision_stats, forward_batch


# --- V-measure --------------------------------------------------------------

@dataclass
class ContingencyTable:
    counts: np.ndarray  # (n_clusters, n_labels)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def col_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def make_contingency(clusters, labels) -> ContingencyTable:
    cl = list(clusters)
    la = list(labels)
    if len(cl) != len(la) or not cl:
        raise InputError("clusters and labels must be nonempty, same length")
    cvals = sorted(set(cl), key=repr)
    lvals = sorted(set(la), key=repr)
    cidx = {v: i for i, v in enumerate(cvals)}
    lidx = {v: i for i, v in enumerate(lvals)}
    counts = np.zeros((len(cvals), len(lvals)), dtype=np.int64)
    for c, l in zip(cl, la):
        counts[cidx[c], lidx[l]] += 1
    return ContingencyTable(counts=counts)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def v_measure(clusters, labels) -> tuple[float, float, float]:
    """Homogeneity, completeness, and their harmonic mean, from
    natural-log entropies of the contingency table.

    Accepts two parallel sequences or two mappings over the same ids.
    """
    if isinstance(clusters, dict) or isinstance(labels, dict):
        if not isinstance(clusters, dict) or not isinstance(labels, dict):
            raise InputError("clusters and labels must both be mappings")
        if set(clusters) != set(labels):
            raise InputError("cluster/label id domains differ")
        ids = sorted(clusters)
        clusters = [clusters[i] for i in ids]
        labels = [labels[i] for i in ids]
    table = make_contingency(clusters, labels)
    n = table.total
    joint = table.counts / n
    h_label = _entropy(table.col_marginals() / n)
    h_cluster = _entropy(table.row_marginals() / n)
    h_joint = _entropy(joint.reshape(-1))
    h_label_given_cluster = h_joint - h_cluster
    h_cluster_given_label = h_joint - h_label
    h = 1.0 if h_label == 0.0 else 1.0 - h_label_given_cluster / h_label
    c = 1.0 if h_cluster == 0.0 else 1.0 - h_cluster_given_label / h_cluster
    v = 0.0 if h + c == 0.0 else 2 * h * c / (h + c)
    return h, c, v


def sid_level_vmeasure(sid_table: dict[int, tuple], catalog: ItemCatalog,
                       level: int) -> float:
    """V-measure of the level-(1..level) SID prefix clustering of the test
    split against leaf category labels."""
    ids = catalog.test_ids
    for i in ids:
        if i not in sid_table:
            raise InputError(f"item {i} missing from SID table")
    clusters = [tuple(sid_table[i][:level]) for i in ids]
    labels = [catalog.items[i].labels[2] for i in ids]
    return v_measure(clusters, labels)[2]


def collision_rate(sid_table: dict[int, tuple]) -> tuple[float, list[int]]:
    stats = collision_stats(sid_table)
    return stats["collision_rate"], stats["distinct_prefixes"]


# --- synthetic user sequences ----------------------------------------------

@dataclass
class UserSequence:
    history: list[int]
    target: int


def gen_user_sequences(catalog: ItemCatalog, n_users: int, T: int = 20,
                       seed: int = 0, preference: float = 0.8
                       ) -> list[UserSequence]:
    """Each user favors two level-2 subtrees: items are drawn from a
    preferred subtree with probability `preference`, else uniformly.  The
    last item is the held-out next-item target."""
    if not catalog.items:
        raise InputError("empty catalog")
    if T >= len(catalog.items):
        raise ConfigurationError("T must be smaller than the catalog")
    if T < 2:
        raise ConfigurationError("T must be >= 2")
    b1, b2, _ = catalog.spec.branching
    n_l2 = b1 * b2
    by_l2: list[list[int]] = [[] for _ in range(n_l2)]
    for it in catalog.items:
        by_l2[it.labels[1]].append(it.id)
    rng = np.random.default_rng(seed)
    n_items = len(catalog.items)
    out = []
    for _ in range(n_users):
        prefs = rng.choice(n_l2, size=min(2, n_l2), replace=False)
        seq = []
        for _ in range(T):
            if rng.random() < preference:
                node = by_l2[int(prefs[int(rng.integers(len(prefs)))])]
                seq.append(node[int(rng.integers(len(node)))])
            else:
                seq.append(int(rng.integers(n_items)))
        out.append(UserSequence(history=seq[:-1], target=seq[-1]))
    return out


# --- next-SID model ---------------------------------------------------------

@dataclass(frozen=True)
class NextSidConfig:
    L: int = 3
    K: int = 16
    d_s: int = 32
    hidden: int = 32
    history: int = 5
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class NextSidModel:
    table: np.ndarray            # (L*K, d_s) token embeddings
    scorers: list[MlpParams]     # scorer l: d_s + l*K -> K
    config: NextSidConfig


def init_next_sid(config: NextSidConfig) -> NextSidModel:
    rng = np.random.default_rng(config.seed)
    table = numkit.quantize_f32(
        0.1 * rng.normal(size=(config.L * config.K, config.d_s)))
    scorers = []
    for lvl in range(config.L):
        m = numkit.mlp_init([config.d_s + lvl * config.K, config.hidden,
                             config.K], rng)
        # zero final layer: an untrained model scores uniformly
        m.weights[-1] = np.zeros_like(m.weights[-1])
        m.biases[-1] = np.zeros_like(m.biases[-1])
        scorers.append(m)
    return NextSidModel(table=table, scorers=scorers, config=config)


def _history_vectors(model: NextSidModel, sequences: list[UserSequence],
                     sid_table: dict[int, tuple]):
    """Mean over the last H history items of their summed level-token
    embeddings.  Also returns the per-item token index lists for the
    embedding-table gradient."""
    c = model.config
    offsets = np.arange(c.L) * c.K
    hist_vecs = np.empty((len(sequences), c.d_s))
    used_rows = []
    for i, seq in enumerate(sequences):
        tail = seq.history[-c.history:]
        rows = []
        for item in tail:
            if item not in sid_table:
                raise InputError(f"item {item} has no SID")
            rows.append(offsets + np.asarray(sid_table[item], dtype=np.int64))
        rows = np.stack(rows)  # (h, L)
        hist_vecs[i] = model.table[rows.reshape(-1)].reshape(
            len(tail), c.L, c.d_s).sum(axis=1).mean(axis=0)
        used_rows.append(rows)
    return hist_vecs, used_rows


def next_sid_loss_grads(model: NextSidModel, sequences: list[UserSequence],
                        sid_table: dict[int, tuple]):
    """Teacher-forced cross-entropy over all L levels of the target SID,
    averaged over sequences.  Returns (loss, table grad, scorer grads)."""
    c = model.config
    n = len(sequences)
    hist, used_rows = _history_vectors(model, sequences, sid_table)
    targets = np.array([sid_table[s.target] for s in sequences],
                       dtype=np.int64)
    loss = 0.0
    g_hist = np.zeros_like(hist)
    scorer_grads = []
    for lvl in range(c.L):
        prefix = np.zeros((n, lvl * c.K))
        for j in range(lvl):
            prefix[np.arange(n), j * c.K + targets[:, j]] = 1.0
        x = np.concatenate([hist, prefix], axis=1)
        logits, cache = numkit.mlp_apply(model.scorers[lvl], x)
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        tok = targets[:, lvl]
        loss += float(np.mean(lse - logits[np.arange(n), tok]))
        soft = np.exp(logits - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), tok] -= 1.0
        grads, gx = numkit.mlp_grad(model.scorers[lvl], cache, soft / n)
        scorer_grads.append(grads)
        g_hist += gx[:, :c.d_s]
    g_table = np.zeros_like(model.table)
    for i, rows in enumerate(used_rows):
        np.add.at(g_table, rows.reshape(-1),
                  np.repeat(g_hist[i][None, :] / rows.shape[0],
                            rows.size, axis=0))
    return loss, g_table, scorer_grads


def train_next_sid(sequences: list[UserSequence],
                   sid_table: dict[int, tuple],
                   config: NextSidConfig) -> NextSidModel:
    """Adam training of the next-SID predictor; deterministic per seed."""
    model = init_next_sid(config)
    flat = [model.table] + [p for s in model.scorers for p in s.flat()]
    opt = numkit.adam_init(flat, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        perm = rng.permutation(len(sequences))
        for start in range(0, len(sequences), config.batch_size):
            batch = [sequences[i] for i in perm[start:start + config.batch_size]]
            if not batch:
                continue
            _, g_table, scorer_grads = next_sid_loss_grads(model, batch,
                                                           sid_table)
            grads = [g_table] + [g for gs in scorer_grads for g in gs]
            flat = [numkit.quantize_f32(p)
                    for p in numkit.adam_step(opt, flat, grads)]
            model.table = flat[0]
            k = 1
            for s in model.scorers:
                cnt = len(s.flat())
                s.set_flat(flat[k:k + cnt])
                k += cnt
    return model


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def beam_decode(model: NextSidModel, hist_vec: np.ndarray,
                beam_width: int) -> list[tuple[float, tuple[int, ...]]]:
    """Level-by-level beam search; returns up to beam_width full SID
    sequences sorted by total log-probability (ties by token order)."""
    c = model.config
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    for lvl in range(c.L):
        expanded = []
        for score, prefix in beams:
            x = np.concatenate([hist_vec,
                                _prefix_onehot(prefix, lvl, c.K)])[None, :]
            logp = _log_softmax(numkit.mlp_apply(model.scorers[lvl], x)[0][0])
            for k in range(c.K):
                expanded.append((score + float(logp[k]), prefix + (k,)))
        expanded.sort(key=lambda t: (-t[0], t[1]))
        beams = expanded[:beam_width]
    return beams


def _prefix_onehot(prefix: tuple[int, ...], lvl: int, K: int) -> np.ndarray:
    v = np.zeros(lvl * K)
    for j, t in enumerate(prefix):
        v[j * K + t] = 1.0
    return v


def hr_at_k(model: NextSidModel, test_sequences: list[UserSequence],
            sid_table: dict[int, tuple], k_list: list[int],
            beam_width: int | None = None) -> dict[int, float]:
    """SID-level Hit Rate: a test case is a hit at K when the target's
    SID sequence appears among the top-K beam-decoded sequences."""
    if beam_width is None:
        beam_width = max(k_list)
    if beam_width < max(k_list):
        raise ConfigurationError("beam width must cover max(K_list)")
    hits = {k: 0 for k in k_list}
    hist, _ = _history_vectors(model, test_sequences, sid_table)
    for i, seq in enumerate(test_sequences):
        truth = tuple(sid_table[seq.target])
        decoded = [s for _, s in beam_decode(model, hist[i], beam_width)]
        for k in k_list:
            if truth in decoded[:k]:
                hits[k] += 1
    n = len(test_sequences)
    return {k: hits[k] / n for k in k_list}


# --- retrieval recall -------------------------------------------------------

def retrieval_recall(embed_fn, catalog: ItemCatalog, k_list: list[int],
                     n_neg: int = 99, seed: int = 0,
                     query_ids: list[int] | None = None) -> dict[int, float]:
    """Sampled-negative retrieval over the test split.

    The query view of an item zeroes its attribute block and re-noises
    its text block (seeded); candidates are the unperturbed embeddings of
    the item plus n_neg seeded-random negatives.  Rank by cosine, ties
    broken by item id.  `embed_fn` maps a (n, feature_dim) matrix to
    (n, d) embeddings.
    """
    n_items = len(catalog.items)
    if n_neg >= n_items:
        raise ConfigurationError("n_neg must be smaller than the catalog")
    if query_ids is None:
        query_ids = catalog.test_ids
    rng = np.random.default_rng(seed)
    spec = catalog.spec
    queries = catalog.features_matrix(query_ids).copy()
    dv, dt = spec.dv, spec.dt
    queries[:, dv:dv + dt] += spec.noise_std * rng.normal(
        size=(len(query_ids), dt))
    queries[:, dv + dt:] = 0.0
    q_emb = embed_fn(queries)
    all_emb = embed_fn(catalog.features_matrix())
    all_norm = all_emb / np.maximum(np.linalg.norm(all_emb, axis=1,
                                                   keepdims=True), 1e-12)
    q_norm = q_emb / np.maximum(np.linalg.norm(q_emb, axis=1, keepdims=True),
                                1e-12)
    hits = {k: 0 for k in k_list}
    for qi, item_id in enumerate(query_ids):
        # one full permutation per query, truncated to n_neg: pools for
        # smaller n_neg on the same seed are nested within larger ones
        perm = rng.permutation(n_items)
        negs = [int(j) for j in perm if j != item_id][:n_neg]
        pool = [item_id] + negs
        sims = all_norm[pool] @ q_norm[qi]
        order = sorted(range(len(pool)), key=lambda j: (-sims[j], pool[j]))
        rank = order.index(0) + 1
        for k in k_list:
            if rank <= k:
                hits[k] += 1
    return {k: hits[k] / len(query_ids) for k in k_list}


# --- report -----------------------------------------------------------------

@dataclass
class EvalReport:
    scheme: str
    seed: int
    config_digest: str
    v_measure: list[float] | None = None     # per level
    hr: dict[int, float] | None = None
    recall: dict[int, float] | None = None
    collision: float | None = None
    distinct_prefixes: list[int] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme, "seed": self.seed,
            "config_digest": self.config_digest,
            "v_measure": self.v_measure,
            "hr": {str(k): v for k, v in self.hr.items()} if self.hr else None,
            "recall": ({str(k): v for k, v in self.recall.items()}
                       if self.recall else None),
            "collision": self.collision,
            "distinct_prefixes": self.distinct_prefixes,
            "extra": self.extra,
        }

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def save_csv(self, path: str) -> None:
        rows = []
        if self.v_measure is not None:
            for lvl, v in enumerate(self.v_measure, start=1):
                rows.append((f"v_measure_l{lvl}", v))
        for name, metrics in (("hr", self.hr), ("recall", self.recall)):
            if metrics:
                for k in sorted(metrics):
                    rows.append((f"{name}@{k}", metrics[k]))
        if self.collision is not None:
            rows.append(("collision_rate", self.collision))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scheme", "metric", "value"])
            for name, v in rows:
                w.writerow([self.scheme, name, f"{v:.9g}"])


def load_report(path: str) -> EvalReport:
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    return EvalReport(
        scheme=d["scheme"], seed=d["seed"],
        config_digest=d["config_digest"], v_measure=d["v_measure"],
        hr={int(k): v for k, v in d["hr"].items()} if d["hr"] else None,
        recall=({int(k): v for k, v in d["recall"].items()}
                if d["recall"] else None),
        collision=d["collision"],
        distinct_prefixes=d["distinct_prefixes"], extra=d.get("extra", {}))
