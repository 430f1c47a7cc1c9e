"""Command-line entry points and experiment orchestration.

Commands: gen-data, train-unisid, fit-rqkmeans, train-rqvae, assign,
eval, sweep-lambda, ablate-joint, case-study, report.  Exit codes:
0 success, 1 runtime failure, 2 usage error, 3 config validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import evalsuite, numkit, objectives, rq, summarizer, unisid
from .catalog import (CatalogSpec, ItemCatalog, generate_catalog,
                      load_catalog, save_catalog)
from .checkpoint import (RqKmeansBundle, RqVaeBundle, UniSidBundle,
                         load_checkpoint, save_checkpoint)
from .errors import ConfigurationError, SidforgeError
from .evalsuite import EvalReport, NextSidConfig
from .objectives import TrainConfig

SCHEMES = ("unisid", "rqkmeans", "rqvae")

DEFAULT_CONFIG = {
    "catalog": {"branching": [4, 4, 4], "n_items": 2048, "dv": 16, "dt": 16,
                "noise_std": 0.3, "ambiguity": True, "train_fraction": 0.9,
                "seed": 7},
    "train": {"lam": 0.1, "tau": 0.07, "epochs": 50, "batch_size": 64,
              "seed": 1, "lr": 1e-3, "L": 3, "K": 16, "d_h": 64, "d_e": 32,
              "d_r": 32, "use_sid": True, "use_emb": True,
              "decoder_frozen_after_warmup": True,
              "decoder_warmup_epochs": None},
    "embed_train": {"epochs": 15, "seed": 3},
    "rq": {"L": 3, "K": 16, "seed": 11, "iterations": 50},
    "rqvae": {"L": 3, "K": 16, "d": 32, "beta": 0.25, "epochs": 15,
              "batch_size": 64, "lr": 1e-3, "seed": 13, "ema_decay": 0.99,
              "hidden": 64},
    "eval": {"k_list": [1, 5, 10, 20], "n_neg": 99, "n_users": 1000,
             "T": 20, "seq_seed": 17, "include_hr": True,
             "include_recall": True, "seed": 23,
             "next_sid": {"d_s": 32, "hidden": 32, "history": 5,
                          "epochs": 8, "batch_size": 64, "lr": 1e-3,
                          "seed": 19}},
    "sweep": {"lambdas": [0.01, 0.1, 0.5, 1.0], "include_hr": False},
    "case_study": {"n_items": 20},
    "paths": {"out_dir": "runs/default"},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigurationError(f"unknown config field: {where}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    try:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}")
    return _merge(DEFAULT_CONFIG, user)


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _threads() -> int:
    raw = os.environ.get("SIDFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"SIDFORGE_THREADS={raw!r} is not an integer")
    if n < 1:
        raise ConfigurationError("SIDFORGE_THREADS must be >= 1")
    return n


def _catalog_spec(cfg: dict) -> CatalogSpec:
    c = cfg["catalog"]
    return CatalogSpec(branching=tuple(c["branching"]), n_items=c["n_items"],
                       dv=c["dv"], dt=c["dt"], noise_std=c["noise_std"],
                       ambiguity=c["ambiguity"],
                       train_fraction=c["train_fraction"], seed=c["seed"])


def _train_config(cfg: dict, **overrides) -> TrainConfig:
    t = dict(cfg["train"])
    t.update(overrides)
    return TrainConfig(**t)


def _catalog_path(out: str) -> str:
    return os.path.join(out, "catalog.json")


def _load_catalog(out: str) -> ItemCatalog:
    path = _catalog_path(out)
    if not os.path.exists(path):
        raise SidforgeError(f"catalog not found at {path}; run gen-data first")
    return load_catalog(path)


def cmd_gen_data(cfg: dict, out: str) -> None:
    catalog = generate_catalog(_catalog_spec(cfg))
    os.makedirs(out, exist_ok=True)
    save_catalog(catalog, _catalog_path(out), digest=config_digest(cfg))
    print(f"wrote {_catalog_path(out)} "
          f"({len(catalog.items)} items, {catalog.spec.n_leaves} leaves)")


def cmd_train_unisid(cfg: dict, out: str, suffix: str = "unisid",
                     **overrides) -> None:
    catalog = _load_catalog(out)
    model, pipeline, report = objectives.train_unisid(
        catalog, _train_config(cfg, **overrides))
    bundle = UniSidBundle(model=model, pipeline=pipeline,
                          digest=config_digest(cfg))
    save_checkpoint(bundle, os.path.join(out, f"{suffix}.ckpt"))
    report.save_csv(os.path.join(out, f"loss_{suffix}.csv"))
    print(f"wrote {suffix}.ckpt ({len(report.steps)} steps)")


def cmd_fit_rqkmeans(cfg: dict, out: str) -> None:
    catalog = _load_catalog(out)
    # stage 1: embeddings from an embedding-only training run
    tc = _train_config(cfg, use_sid=False, lam=0.0, **cfg["embed_train"])
    embed_model, _, report = objectives.train_unisid(catalog, tc)
    emb = unisid.embed_batch(embed_model, catalog.features_matrix())
    r = cfg["rq"]
    codebook = rq.rq_kmeans_fit(emb, L=r["L"], K=r["K"], seed=r["seed"],
                                iterations=r["iterations"])
    bundle = RqKmeansBundle(embed_model=embed_model, codebook=codebook,
                            digest=config_digest(cfg))
    save_checkpoint(bundle, os.path.join(out, "rqkmeans.ckpt"))
    report.save_csv(os.path.join(out, "loss_rqkmeans_embed.csv"))
    print("wrote rqkmeans.ckpt")


def cmd_train_rqvae(cfg: dict, out: str) -> None:
    catalog = _load_catalog(out)
    r = cfg["rqvae"]
    config = rq.RqVaeConfig(L=r["L"], K=r["K"], d=r["d"], beta=r["beta"],
                            epochs=r["epochs"], batch_size=r["batch_size"],
                            lr=r["lr"], seed=r["seed"],
                            ema_decay=r["ema_decay"], hidden=r["hidden"])
    model, losses = rq.rq_vae_fit(catalog.features_matrix(), config)
    save_checkpoint(RqVaeBundle(model=model, digest=config_digest(cfg)),
                    os.path.join(out, "rqvae.ckpt"))
    with open(os.path.join(out, "loss_rqvae.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.9g}"])
    print("wrote rqvae.ckpt")


def _sid_table_for(scheme: str, bundle, catalog: ItemCatalog) -> dict:
    if scheme == "unisid":
        table, _ = unisid.assign_catalog(bundle.model, catalog)
        return table
    x = catalog.features_matrix()
    if scheme == "rqkmeans":
        emb = unisid.embed_batch(bundle.embed_model, x)
        tokens = rq.rq_assign_batch(bundle.codebook, emb)
    else:
        z, _ = numkit.mlp_apply(bundle.model.encoder, x)
        tokens = rq.rq_assign_batch(bundle.model.codebook, z)
    return {it.id: tuple(int(t) for t in tokens[i])
            for i, it in enumerate(catalog.items)}


def _present_schemes(out: str, suffix: str = ".ckpt") -> list[str]:
    return [s for s in SCHEMES
            if os.path.exists(os.path.join(out, f"{s}{suffix}"))]


def cmd_assign(cfg: dict, out: str, schemes=None) -> None:
    catalog = _load_catalog(out)
    schemes = schemes or _present_schemes(out)
    if not schemes:
        raise SidforgeError("no checkpoints found; train a model first")
    for scheme in schemes:
        bundle = load_checkpoint(os.path.join(out, f"{scheme}.ckpt"))
        table = _sid_table_for(scheme, bundle, catalog)
        L = len(next(iter(table.values())))
        doc = {"L": L, "K": cfg["train"]["K"] if scheme == "unisid"
               else cfg["rq" if scheme == "rqkmeans" else "rqvae"]["K"],
               "config_digest": config_digest(cfg),
               "sids": {str(i): list(t) for i, t in sorted(table.items())}}
        path = os.path.join(out, f"sids_{scheme}.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, separators=(",", ":"), sort_keys=True)
        print(f"wrote {path}")


def load_sid_table(path: str) -> dict[int, tuple]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return {int(i): tuple(t) for i, t in doc["sids"].items()}


def _embed_fn(scheme: str, bundle):
    if scheme == "unisid":
        return lambda x: unisid.embed_batch(bundle.model, x)
    if scheme == "rqkmeans":
        return lambda x: unisid.embed_batch(bundle.embed_model, x)
    return lambda x: numkit.mlp_apply(bundle.model.encoder, x)[0]


def evaluate_scheme(cfg: dict, out: str, scheme: str,
                    include_hr: bool | None = None,
                    include_recall: bool | None = None) -> EvalReport:
    catalog = _load_catalog(out)
    table = load_sid_table(os.path.join(out, f"sids_{scheme}.json"))
    e = cfg["eval"]
    include_hr = e["include_hr"] if include_hr is None else include_hr
    include_recall = (e["include_recall"] if include_recall is None
                      else include_recall)
    vs = [evalsuite.sid_level_vmeasure(table, catalog, lvl)
          for lvl in (1, 2, 3)]
    coll, prefixes = evalsuite.collision_rate(table)
    report = EvalReport(scheme=scheme, seed=e["seed"],
                        config_digest=config_digest(cfg), v_measure=vs,
                        collision=coll, distinct_prefixes=prefixes)
    if include_hr:
        seqs = evalsuite.gen_user_sequences(catalog, e["n_users"], e["T"],
                                            seed=e["seq_seed"])
        n_test = max(1, len(seqs) // 5)
        train_seqs, test_seqs = seqs[:-n_test], seqs[-n_test:]
        ns = e["next_sid"]
        nsc = NextSidConfig(L=cfg["train"]["L"], K=doc_k(cfg, scheme),
                            d_s=ns["d_s"], hidden=ns["hidden"],
                            history=ns["history"], epochs=ns["epochs"],
                            batch_size=ns["batch_size"], lr=ns["lr"],
                            seed=ns["seed"])
        model = evalsuite.train_next_sid(train_seqs, table, nsc)
        report.hr = evalsuite.hr_at_k(model, test_seqs, table, e["k_list"])
    if include_recall:
        bundle = load_checkpoint(os.path.join(out, f"{scheme}.ckpt"))
        report.recall = evalsuite.retrieval_recall(
            _embed_fn(scheme, bundle), catalog, e["k_list"],
            n_neg=e["n_neg"], seed=e["seed"])
    return report


def doc_k(cfg: dict, scheme: str) -> int:
    if scheme == "unisid":
        return cfg["train"]["K"]
    return cfg["rq" if scheme == "rqkmeans" else "rqvae"]["K"]


def cmd_eval(cfg: dict, out: str) -> None:
    schemes = [s for s in SCHEMES
               if os.path.exists(os.path.join(out, f"sids_{s}.json"))]
    if not schemes:
        raise SidforgeError("no SID tables found; run assign first")
    for scheme in schemes:
        report = evaluate_scheme(cfg, out, scheme)
        report.save_json(os.path.join(out, f"eval_{scheme}.json"))
        report.save_csv(os.path.join(out, f"eval_{scheme}.csv"))
        print(f"wrote eval_{scheme}.json")


def cmd_sweep_lambda(cfg: dict, out: str) -> None:
    lambdas = cfg["sweep"]["lambdas"]
    include_hr = cfg["sweep"]["include_hr"]
    for lam in lambdas:
        sub = os.path.join(out, "sweep", f"lambda_{lam:g}")
        os.makedirs(sub, exist_ok=True)
        if not os.path.exists(_catalog_path(sub)):
            catalog = generate_catalog(_catalog_spec(cfg))
            save_catalog(catalog, _catalog_path(sub),
                         digest=config_digest(cfg))
        cmd_train_unisid(cfg, sub, lam=lam)
        cmd_assign(cfg, sub, schemes=["unisid"])
        report = evaluate_scheme(cfg, sub, "unisid", include_hr=include_hr)
        report.extra["lam"] = lam
        report.save_json(os.path.join(sub, "eval_unisid.json"))
        report.save_csv(os.path.join(sub, "eval_unisid.csv"))
        print(f"lambda={lam:g}: v_measure={report.v_measure}")


def cmd_ablate_joint(cfg: dict, out: str) -> None:
    variants = {
        "joint": {},
        "sid_only": {"use_emb": False, "lam": 0.0},
        "emb_only": {"use_sid": False, "lam": 0.0},
    }
    catalog_ready = os.path.exists(_catalog_path(out))
    if not catalog_ready:
        cmd_gen_data(cfg, out)
    for name, overrides in variants.items():
        sub = os.path.join(out, "ablate", name)
        os.makedirs(sub, exist_ok=True)
        if not os.path.exists(_catalog_path(sub)):
            save_catalog(_load_catalog(out), _catalog_path(sub),
                         digest=config_digest(cfg))
        cmd_train_unisid(cfg, sub, **overrides)
        cmd_assign(cfg, sub, schemes=["unisid"])
        report = evaluate_scheme(cfg, sub, "unisid", include_hr=False)
        report.extra["variant"] = name
        report.save_json(os.path.join(sub, "eval_unisid.json"))
        print(f"{name}: v_measure={report.v_measure}")


def cmd_case_study(cfg: dict, out: str) -> None:
    catalog = _load_catalog(out)
    bundle = load_checkpoint(os.path.join(out, "unisid.ckpt"))
    ids = catalog.test_ids[:cfg["case_study"]["n_items"]]
    fp = unisid.forward_batch(bundle.model, catalog.features_matrix(ids))
    h, _ = summarizer.recon_state(fp.logits, fp.embedding, bundle.pipeline)
    decoded = summarizer.decode_summary(h, bundle.pipeline)
    path = os.path.join(out, "case_study.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# config_digest: {config_digest(cfg)}\n")
        for i, item_id in enumerate(ids):
            text = summarizer.summary_text(decoded[i], bundle.pipeline.vocab)
            f.write(f"{item_id}\t{text}\n")
    print(f"wrote {path}")


def cmd_report(cfg: dict, out: str) -> None:
    rows = []
    for scheme in SCHEMES:
        path = os.path.join(out, f"eval_{scheme}.json")
        if not os.path.exists(path):
            continue
        rows.append(evalsuite.load_report(path))
    if not rows:
        raise SidforgeError("no eval reports found; run eval first")
    path = os.path.join(out, "report.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = (["scheme"] + [f"v_measure_l{i}" for i in (1, 2, 3)]
                  + [f"hr@{k}" for k in cfg["eval"]["k_list"]]
                  + [f"recall@{k}" for k in cfg["eval"]["k_list"]]
                  + ["collision"])
        w.writerow(header)
        for r in rows:
            row = [r.scheme]
            row += [f"{v:.4f}" for v in (r.v_measure or [])]
            row += [f"{r.hr[k]:.4f}" if r.hr else ""
                    for k in cfg["eval"]["k_list"]]
            row += [f"{r.recall[k]:.4f}" if r.recall else ""
                    for k in cfg["eval"]["k_list"]]
            row.append(f"{r.collision:.4f}" if r.collision is not None else "")
            w.writerow(row)
    print(f"wrote {path}")
    for r in rows:
        print(f"{r.scheme}: V={r.v_measure} HR={r.hr} R={r.recall} "
              f"collision={r.collision}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-unisid": cmd_train_unisid,
    "fit-rqkmeans": cmd_fit_rqkmeans,
    "train-rqvae": cmd_train_rqvae,
    "assign": cmd_assign,
    "eval": cmd_eval,
    "sweep-lambda": cmd_sweep_lambda,
    "ablate-joint": cmd_ablate_joint,
    "case-study": cmd_case_study,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sidforge",
        description="Desk-scale semantic-ID generation and evaluation")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override every seed in config")
    p.add_argument("--out", help="output directory (default from config)")
    return p


def _apply_seed_override(cfg: dict, seed: int) -> None:
    cfg["catalog"]["seed"] = seed
    cfg["train"]["seed"] = seed + 1
    cfg["embed_train"]["seed"] = seed + 2
    cfg["rq"]["seed"] = seed + 3
    cfg["rqvae"]["seed"] = seed + 4
    cfg["eval"]["seed"] = seed + 5
    cfg["eval"]["seq_seed"] = seed + 6
    cfg["eval"]["next_sid"]["seed"] = seed + 7


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _threads()
        if args.seed is not None:
            _apply_seed_override(cfg, args.seed)
        out = args.out or cfg["paths"]["out_dir"]
        os.makedirs(out, exist_ok=True)
        _catalog_spec(cfg).validate()
        COMMANDS[args.command](cfg, out)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    except SidforgeError as e:
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
