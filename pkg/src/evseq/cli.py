"""Command-line entry point: synth | train | eval | embed | gradcheck | sweep.

One JSON config document drives every command. The document is validated
against CONFIG_SCHEMA (unknown keys rejected) after merging file contents and
``--set section.key=value`` overrides onto the defaults. Artifacts land under
``--out`` as ``{command}_{config_hash}.{ext}`` so a config uniquely names its
outputs and reruns are byte-identical.

Exit codes: 0 success, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import jsonschema

from .data import (DataError, Dataset, SynthSpec, load_csv, normalize_amounts,
                   save_csv, split_dataset, synthesize_dataset)
from .encoder import EncoderError
from .evaluation import EvaluationError, evaluate, extract_embeddings, summarize_runs
from .objectives import ObjectiveError
from .training import (CheckpointError, ConfigError, TrainConfig, TrainingError,
                       config_hash, data_fingerprint, gradcheck_suite,
                       load_checkpoint, save_checkpoint, train)

LAMBDA_GRID = (0.1, 0.05, 0.01, 0.005)

_num_or_null = {"type": ["number", "null"]}
_pair = {"type": "array", "items": {"type": "integer", "minimum": 1},
         "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "csv_path": {"type": "string"},
                "labels_path": {"type": "string"},
                "synth_spec": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "n_classes": {"type": "integer", "minimum": 2},
                        "vocab_size": {"type": "integer", "minimum": 2},
                        "n_sequences": {"type": "integer", "minimum": 3},
                        "len_range": _pair,
                        "beta": {"type": "number"},
                        "perm_mass": {"type": "number"},
                        "amount_mu": {"type": "number"},
                        "amount_mu_spread": {"type": "number"},
                        "amount_sigma": {"type": "number"},
                    },
                },
                "seed": {"type": "integer"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "H": {"type": "integer", "minimum": 1},
            },
        },
        "objective": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["coles", "cmlm", "coles_masked", "hybrid"]},
                "lambda": {"type": "number", "minimum": 0},
                "rho": {"type": "number", "exclusiveMinimum": 0},
                "mask_rate": {"type": "number", "exclusiveMinimum": 0,
                              "exclusiveMaximum": 1},
                "n_views": {"type": "integer", "minimum": 2},
                "n_neg": {"type": "integer", "minimum": 1},
                "n_hard": {"type": "integer", "minimum": 1},
                "view_len_range": {"oneOf": [_pair, {"type": "null"}]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "grad_clip": _num_or_null,
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "probe_epochs": {"type": "integer", "minimum": 1},
                "probe_lr": {"type": "number", "exclusiveMinimum": 0},
                "seeds": {"type": "array", "items": {"type": "integer"},
                          "minItems": 1},
            },
        },
    },
}

DEFAULTS = {
    "data": {"synth_spec": {}, "seed": 0},
    "model": {"k": 24, "H": 64},
    "objective": {"method": "coles", "lambda": 0.05, "rho": 0.5,
                  "mask_rate": 0.15, "n_views": 5, "n_neg": 16, "n_hard": 5,
                  "view_len_range": None},
    "train": {"epochs": 20, "batch_size": 64, "lr": 1e-3, "seed": 0,
              "grad_clip": None},
    "eval": {"probe_epochs": 100, "probe_lr": 0.5, "seeds": [0, 1, 2]},
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {path!r} crosses a non-object value")
    node[parts[-1]] = value


def load_config(config_path, overrides) -> dict:
    """Merge defaults <- file <- --set overrides, then validate."""
    doc = {}
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
    cfg = _deep_merge(DEFAULTS, doc)
    for item in overrides:
        _apply_override(cfg, item)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "(root)"
        raise ConfigError(f"config field {where}: {e.message}")
    if cfg["data"].get("csv_path") and cfg["data"].get("synth_spec"):
        raise ConfigError("config field data: give csv_path or synth_spec, not both")
    return cfg


def run_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def synth_tag(cfg: dict) -> str:
    return run_hash({"data": cfg["data"]})


def train_tag(cfg: dict) -> str:
    """Hash of everything that shapes the training trajectory.

    ``train.epochs`` is left out so a rerun with a larger budget resumes the
    same checkpoint file instead of starting a sibling run.
    """
    sub = {k: cfg[k] for k in ("data", "model", "objective", "train")}
    sub["train"] = {k: v for k, v in sub["train"].items() if k != "epochs"}
    return run_hash(sub)


def _synth_spec(cfg: dict) -> SynthSpec:
    fields = dict(cfg["data"].get("synth_spec") or {})
    if "len_range" in fields:
        fields["len_range"] = tuple(fields["len_range"])
    return SynthSpec(**fields)


def build_dataset(cfg: dict) -> Dataset:
    data = cfg["data"]
    if data.get("csv_path"):
        return load_csv(data["csv_path"], data.get("labels_path"))
    return synthesize_dataset(_synth_spec(cfg), data["seed"])


def build_splits(cfg: dict) -> tuple[Dataset, Dataset, Dataset]:
    """Split, then normalize amounts everywhere with train-split stats."""
    ds = build_dataset(cfg)
    tr, va, te = split_dataset(ds, seed=cfg["data"]["seed"])
    tr = normalize_amounts(tr)
    va = normalize_amounts(va, tr.amount_stats)
    te = normalize_amounts(te, tr.amount_stats)
    return tr, va, te


def train_config_from(cfg: dict, **over) -> TrainConfig:
    obj, tr, model = cfg["objective"], cfg["train"], cfg["model"]
    rng_range = obj["view_len_range"]
    tc = TrainConfig(
        method=obj["method"], lam=obj["lambda"], rho=obj["rho"],
        mask_rate=obj["mask_rate"], n_views=obj["n_views"], n_neg=obj["n_neg"],
        n_hard=obj["n_hard"],
        view_len_range=tuple(rng_range) if rng_range else None,
        k=model["k"], hidden=model["H"], batch_size=tr["batch_size"],
        epochs=tr["epochs"], lr=tr["lr"], grad_clip=tr["grad_clip"],
        seed=tr["seed"])
    for key, val in over.items():
        setattr(tc, key, val)
    tc.validate()
    return tc


# commands ----------------------------------------------------------------


def cmd_synth(cfg, out_dir: Path, force: bool) -> int:
    ds = synthesize_dataset(_synth_spec(cfg), cfg["data"]["seed"])
    tag = synth_tag(cfg)
    events = out_dir / f"synth_{tag}.csv"
    save_csv(ds, events, labels_path=out_dir / f"synth_{tag}_labels.csv",
             vocab_path=out_dir / f"synth_{tag}_vocab.txt")
    print(f"synth: wrote {events} ({len(ds)} sequences, vocab {ds.vocab_size})")
    return 0


def cmd_train(cfg, out_dir: Path, force: bool) -> int:
    tr, _, _ = build_splits(cfg)
    tc = train_config_from(cfg)
    tag = train_tag(cfg)
    log_path = out_dir / f"train_{tag}.jsonl"
    ckpt_path = out_dir / f"train_{tag}.npz"
    resume = None
    if ckpt_path.exists():
        resume = load_checkpoint(ckpt_path)
        if resume.epoch >= tc.epochs:
            print(f"train: {ckpt_path} already has {resume.epoch} epochs")
            return 0
        print(f"train: resuming {ckpt_path} from epoch {resume.epoch}")
    else:
        log_path.unlink(missing_ok=True)
    cp = train(tc, tr, log_path=log_path, resume=resume, force=force)
    save_checkpoint(cp, ckpt_path)
    last = cp.loss_history[-1] if cp.loss_history else float("nan")
    print(f"train: wrote {ckpt_path} (epoch {cp.epoch}, loss {last:.6f})")
    return 0


def cmd_eval(cfg, out_dir: Path, force: bool) -> int:
    splits = build_splits(cfg)
    ckpt_path = out_dir / f"train_{train_tag(cfg)}.npz"
    if not ckpt_path.exists():
        raise TrainingError(f"no checkpoint at {ckpt_path}; run train first")
    cp = load_checkpoint(ckpt_path)
    tc = train_config_from(cfg)
    mismatches = []
    if cp.config_hash != config_hash(tc):
        mismatches.append("training config")
    if cp.data_fingerprint != data_fingerprint(splits[0]):
        mismatches.append("dataset")
    if mismatches and not force:
        raise TrainingError(f"checkpoint {ckpt_path} does not match the current "
                            f"{' and '.join(mismatches)}; refusing to evaluate")
    ev = cfg["eval"]
    runs = [evaluate(cp, splits, seed=s, probe_epochs=ev["probe_epochs"],
                     probe_lr=ev["probe_lr"]) for s in ev["seeds"]]
    report = {"config_hash": run_hash(cfg), "method": runs[0]["method"],
              "lambda": runs[0]["lambda"], "runs": runs,
              "summary": summarize_runs(runs)}
    path = out_dir / f"eval_{run_hash(cfg)}.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    s = report["summary"]
    print(f"eval: wrote {path} (global {s['global_auc']['mean']:.4f} "
          f"+/- {s['global_auc']['std']:.4f}, local {s['local_auc']['mean']:.4f} "
          f"+/- {s['local_auc']['std']:.4f})")
    return 0


def cmd_embed(cfg, out_dir: Path, force: bool) -> int:
    tag = train_tag(cfg)
    ckpt_path = out_dir / f"train_{tag}.npz"
    if not ckpt_path.exists():
        raise TrainingError(f"no checkpoint at {ckpt_path}; run train first")
    cp = load_checkpoint(ckpt_path)
    tr, va, te = build_splits(cfg)
    merged = Dataset(tr.sequences + va.sequences + te.sequences, tr.vocab,
                     tr.num_classes, tr.amount_stats)
    table = extract_embeddings(cp, merged)
    path = out_dir / f"embed_{tag}.csv"
    with open(path, "w") as fh:
        fh.write("seq_id," + ",".join(f"v_{i}" for i in range(cp.hidden)) + "\n")
        for sid, vec in zip(table.ids, table.vectors):
            fh.write(sid + "," + ",".join(repr(float(x)) for x in vec) + "\n")
    print(f"embed: wrote {path} ({len(table.ids)} rows, H={cp.hidden})")
    return 0


def cmd_gradcheck(cfg, out_dir: Path, force: bool) -> int:
    worst, failures = gradcheck_suite()
    print(f"gradcheck: max relative error {worst:.3e} across all methods")
    if failures:
        for f in failures[:20]:
            print(f"  FAIL {f}", file=sys.stderr)
        raise TrainingError(f"{len(failures)} gradient entries exceed tolerance")
    return 0


def _rank(values: dict, higher_better=True) -> dict:
    """Ranks with 1 = best; exact ties keep insertion order."""
    names = list(values)
    vals = np.array([values[n] for n in names])
    order = (-vals).argsort(kind="stable") if higher_better else vals.argsort(kind="stable")
    ranks = np.empty(len(names))
    ranks[order] = np.arange(1, len(names) + 1)
    return {n: float(r) for n, r in zip(names, ranks)}


def cmd_sweep(cfg, out_dir: Path, force: bool) -> int:
    tag = run_hash(cfg)
    splits = build_splits(cfg)
    seeds = cfg["eval"]["seeds"]
    ev = cfg["eval"]
    cells = [("coles", 0.0), ("cmlm", 0.0), ("coles_masked", 0.0)]
    cells += [("hybrid", lam) for lam in LAMBDA_GRID]
    rows = []
    for method, lam in cells:
        for seed in seeds:
            tc = train_config_from(cfg, method=method, lam=lam, seed=seed)
            cp = train(tc, splits[0])
            rep = evaluate(cp, splits, seed=seed, probe_epochs=ev["probe_epochs"],
                           probe_lr=ev["probe_lr"], target="val")
            name = method if method != "hybrid" else f"hybrid@{lam}"
            rows.append({"name": name, "method": method, "lambda": lam,
                         "seed": seed, "global_auc": rep["global_auc"],
                         "local_auc": rep["local_auc"]})
            print(f"sweep: {name} seed {seed}: global {rep['global_auc']:.4f} "
                  f"local {rep['local_auc']:.4f}")
    names = sorted({r["name"] for r in rows})
    table = {}
    for name in names:
        sub = [r for r in rows if r["name"] == name]
        table[name] = {
            key: {"mean": float(np.mean([r[key] for r in sub])),
                  "std": float(np.std([r[key] for r in sub]))}
            for key in ("global_auc", "local_auc")}
    mean_ranks = {}
    for key in ("global_auc", "local_auc"):
        per_seed = []
        for seed in seeds:
            vals = {r["name"]: r[key] for r in rows if r["seed"] == seed}
            per_seed.append(_rank(vals))
        mean_ranks[key] = {n: float(np.mean([p[n] for p in per_seed]))
                           for n in names}
    report = {"config_hash": tag, "lambda_grid": list(LAMBDA_GRID),
              "seeds": list(seeds), "cells": rows, "table": table,
              "mean_ranks": mean_ranks}
    path = out_dir / f"sweep_{tag}.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"sweep: wrote {path}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "embed": cmd_embed, "gradcheck": cmd_gradcheck, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="evseq",
        description="Self-supervised event-sequence representation learning")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY=VALUE", help="override a config field")
    parser.add_argument("--out", default=".", help="artifact directory")
    parser.add_argument("--force", action="store_true",
                        help="proceed despite config/data mismatches")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out_dir, args.force)
    except (ConfigError,) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, EncoderError, ObjectiveError, TrainingError,
            CheckpointError, EvaluationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
