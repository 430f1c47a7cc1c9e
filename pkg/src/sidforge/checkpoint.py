"""Binary checkpoint format shared by all model kinds.

Layout: magic "SIDF", u32 format version, u32 kind tag, u32 metadata
length, UTF-8 JSON metadata (dims, array shapes, vocabulary, config
digest), then the parameter arrays in declared order as little-endian
float32.  Loading is bit-exact because trained parameters are kept on
the float32 grid.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointCorruptionError, CheckpointFormatError
from .numkit import MlpParams
from .rq import Codebook, RqVaeModel
from .summarizer import ReconPipeline, SummaryVocab
from .unisid import UniSidConfig, UniSidModel

MAGIC = b"SIDF"
VERSION = 1
KIND_TAGS = {"unisid": 1, "rqkmeans": 2, "rqvae": 3}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


@dataclass
class UniSidBundle:
    model: UniSidModel
    pipeline: ReconPipeline
    digest: str = ""


@dataclass
class RqKmeansBundle:
    embed_model: UniSidModel  # source of the fixed embeddings
    codebook: Codebook
    digest: str = ""


@dataclass
class RqVaeBundle:
    model: RqVaeModel
    digest: str = ""


def _mlp_meta(m: MlpParams) -> dict:
    return {"shapes": [list(w.shape) for w in m.weights],
            "activations": m.activations}


def _mlp_from_meta(meta: dict, arrays: list[np.ndarray]) -> MlpParams:
    n = len(meta["shapes"])
    weights = arrays[0:2 * n:2]
    biases = arrays[1:2 * n:2]
    return MlpParams(weights=list(weights), biases=list(biases),
                     activations=list(meta["activations"]))


def _unisid_parts(model: UniSidModel) -> tuple[dict, list[np.ndarray]]:
    c = model.config
    meta = {
        "config": {"L": c.L, "K": c.K, "d_h": c.d_h, "d_e": c.d_e,
                   "feature_dim": model.encoder.in_dim},
        "mlps": {"encoder": _mlp_meta(model.encoder),
                 "sid_head": _mlp_meta(model.sid_head),
                 "emb_head": _mlp_meta(model.emb_head)},
    }
    arrays = (model.encoder.flat() + model.sid_head.flat()
              + model.emb_head.flat())
    return meta, arrays


def _unisid_from_parts(meta: dict, arrays: list[np.ndarray]) -> UniSidModel:
    c = meta["config"]
    mlps = {}
    k = 0
    for name in ("encoder", "sid_head", "emb_head"):
        cnt = 2 * len(meta["mlps"][name]["shapes"])
        mlps[name] = _mlp_from_meta(meta["mlps"][name], arrays[k:k + cnt])
        k += cnt
    return UniSidModel(encoder=mlps["encoder"], sid_head=mlps["sid_head"],
                       emb_head=mlps["emb_head"],
                       config=UniSidConfig(L=c["L"], K=c["K"],
                                           d_h=c["d_h"], d_e=c["d_e"]))


def _to_parts(bundle) -> tuple[str, dict, list[np.ndarray]]:
    if isinstance(bundle, UniSidBundle):
        meta, arrays = _unisid_parts(bundle.model)
        p = bundle.pipeline
        meta["d_r"] = p.d_r
        meta["vocab"] = p.vocab.tokens
        meta["mlps"]["recon_head"] = _mlp_meta(p.recon_head)
        meta["mlps"]["decoder"] = _mlp_meta(p.decoder)
        arrays = arrays + p.recon_head.flat() + p.decoder.flat()
        return "unisid", meta, arrays
    if isinstance(bundle, RqKmeansBundle):
        meta, arrays = _unisid_parts(bundle.embed_model)
        meta["codebook_shape"] = list(bundle.codebook.levels.shape)
        return "rqkmeans", meta, arrays + [bundle.codebook.levels]
    if isinstance(bundle, RqVaeBundle):
        m = bundle.model
        meta = {"beta": m.beta,
                "codebook_shape": list(m.codebook.levels.shape),
                "mlps": {"encoder": _mlp_meta(m.encoder),
                         "decoder": _mlp_meta(m.decoder)}}
        arrays = m.encoder.flat() + m.decoder.flat() + [m.codebook.levels]
        return "rqvae", meta, arrays
    raise CheckpointFormatError(f"unknown bundle type {type(bundle)!r}")


def _array_shapes(meta: dict, kind: str) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = []
    if kind == "unisid":
        order = ("encoder", "sid_head", "emb_head", "recon_head", "decoder")
    elif kind == "rqkmeans":
        order = ("encoder", "sid_head", "emb_head")
    else:
        order = ("encoder", "decoder")
    for name in order:
        for (din, dout) in meta["mlps"][name]["shapes"]:
            shapes.append((din, dout))
            shapes.append((dout,))
    if kind in ("rqkmeans", "rqvae"):
        shapes.append(tuple(meta["codebook_shape"]))
    return shapes


def save_checkpoint(bundle, path: str) -> None:
    """Atomic write (temp file + rename)."""
    kind, meta, arrays = _to_parts(bundle)
    meta["digest"] = getattr(bundle, "digest", "")
    blob = json.dumps(meta, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<III", VERSION, KIND_TAGS[kind], len(blob))
    body = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header + blob + body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise CheckpointCorruptionError("file too short for a header")
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}")
    version, tag, meta_len = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    if tag not in TAG_KINDS:
        raise CheckpointFormatError(f"unknown model kind tag {tag}")
    kind = TAG_KINDS[tag]
    if len(raw) < 16 + meta_len:
        raise CheckpointCorruptionError("truncated metadata")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptionError(f"unreadable metadata: {e}") from e
    shapes = _array_shapes(meta, kind)
    body = raw[16 + meta_len:]
    expected = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(body) != expected:
        raise CheckpointCorruptionError(
            f"payload is {len(body)} bytes, expected {expected}")
    arrays = []
    off = 0
    for s in shapes:
        cnt = int(np.prod(s))
        arrays.append(np.frombuffer(body, dtype="<f4", count=cnt,
                                    offset=off).astype(np.float64).reshape(s))
        off += 4 * cnt
    digest = meta.get("digest", "")
    if kind == "unisid":
        n_model = sum(2 * len(meta["mlps"][m]["shapes"])
                      for m in ("encoder", "sid_head", "emb_head"))
        model = _unisid_from_parts(meta, arrays[:n_model])
        k = n_model
        heads = {}
        for name in ("recon_head", "decoder"):
            cnt = 2 * len(meta["mlps"][name]["shapes"])
            heads[name] = _mlp_from_meta(meta["mlps"][name],
                                         arrays[k:k + cnt])
            k += cnt
        vocab = SummaryVocab(tokens=list(meta["vocab"]),
                             index={t: i for i, t in enumerate(meta["vocab"])})
        pipeline = ReconPipeline(recon_head=heads["recon_head"],
                                 decoder=heads["decoder"], vocab=vocab,
                                 d_r=meta["d_r"])
        return UniSidBundle(model=model, pipeline=pipeline, digest=digest)
    if kind == "rqkmeans":
        model = _unisid_from_parts(meta, arrays[:-1])
        return RqKmeansBundle(embed_model=model,
                              codebook=Codebook(levels=arrays[-1]),
                              digest=digest)
    model = RqVaeModel(
        encoder=_mlp_from_meta(meta["mlps"]["encoder"],
                               arrays[:2 * len(meta["mlps"]["encoder"]["shapes"])]),
        decoder=_mlp_from_meta(
            meta["mlps"]["decoder"],
            arrays[2 * len(meta["mlps"]["encoder"]["shapes"]):-1]),
        codebook=Codebook(levels=arrays[-1]), beta=meta["beta"])
    return RqVaeBundle(model=model, digest=digest)
