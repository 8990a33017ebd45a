"""Command-line entry point: synth, encode, train, eval, sweep, attn.

Every subcommand writes plain files into ``--out``. Outputs are assembled in
a temporary sibling directory and moved into place only once complete, so a
failed command leaves nothing behind.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .alga import graph_factors, long_range_embedding, rw_kernel
from .checkpoint import load_checkpoint
from .graph import (
    DEFAULT_THRESHOLD,
    SplitIndices,
    build_graph,
    file_sha256,
    load_dataset,
    read_manifest,
    read_series_csv,
    write_graph_cache,
    write_matrix_csv,
)
from .model import AlterModel, ModelConfig, export_attention
from .synth import SynthConfig, generate_dataset
from .training import EncodedData, TrainConfig, encode_dataset, evaluate, summarize, train_loop

log = logging.getLogger("alter")

RUN_KEYS = {"dataset", "threshold", "renormalize", "seeds"}
DEFAULT_HOPS = (2, 4, 8, 16, 32)


class CliError(Exception):
    """Bad input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _threads() -> int:
    raw = os.environ.get("ALTER_THREADS", "")
    if not raw:
        return max(1, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"ALTER_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError("ALTER_THREADS must be >= 1")
    return n


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def load_config(path: str | None, overrides: dict, seed: int | None) -> dict:
    cfg = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise CliError(f"config {path} must be a JSON object")
    cfg.update(overrides)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def split_run_config(cfg: dict) -> tuple[dict, ModelConfig, TrainConfig]:
    """Separate a flat run config into (run options, model config, train config)."""
    model_keys, train_keys = ModelConfig.field_names(), TrainConfig.field_names()
    unknown = set(cfg) - model_keys - train_keys - RUN_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    run = {"dataset": None, "threshold": DEFAULT_THRESHOLD, "renormalize": False, "seeds": None}
    run.update({k: v for k, v in cfg.items() if k in RUN_KEYS})
    try:
        model_cfg = ModelConfig(**{k: v for k, v in cfg.items() if k in model_keys})
        train_cfg = TrainConfig(**{k: v for k, v in cfg.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None
    if run["seeds"] is None:
        run["seeds"] = [train_cfg.seed]
    return run, model_cfg, train_cfg


def effective_config(run: dict, model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    out = {**run, **model_cfg.to_dict(), **asdict(train_cfg)}
    out["ratios"] = list(out["ratios"])
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


@contextlib.contextmanager
def atomic_dir(out: str | Path):
    """Yield a scratch directory that replaces ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _require_dataset(run: dict) -> Path:
    if not run["dataset"]:
        raise CliError("run config needs a 'dataset' directory")
    root = Path(run["dataset"])
    if not (root / "dataset.json").is_file():
        raise CliError(f"{root} is not a dataset directory (no dataset.json)")
    return root


def _encode(run: dict, k_hops: int) -> EncodedData:
    ds = load_dataset(_require_dataset(run), float(run["threshold"]))
    return encode_dataset(ds, k_hops, bool(run["renormalize"]))


def write_pgm(path: Path, m: np.ndarray) -> None:
    """Plain (ASCII) greyscale PGM, scaled so the largest entry is white."""
    top = float(np.max(m)) if m.size else 0.0
    pix = np.zeros(m.shape, dtype=int) if top <= 0 else np.rint(np.clip(m, 0, None) / top * 255).astype(int)
    rows = [" ".join(str(v) for v in row) for row in pix]
    path.write_text(f"P2\n{m.shape[1]} {m.shape[0]}\n255\n" + "\n".join(rows) + "\n")


def _model_from_checkpoint(path: str) -> tuple[AlterModel, dict]:
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    tensors, meta = load_checkpoint(path)
    if "model" not in meta or "n_features" not in meta:
        raise CliError(f"{path}: checkpoint lacks model metadata")
    model = AlterModel(ModelConfig(**meta["model"]), meta["n_features"], meta["n_nodes"])
    model.load_state_dict(tensors)
    return model, meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = load_config(args.config, parse_overrides(args.set), args.seed)
    threshold = cfg.pop("threshold", DEFAULT_THRESHOLD)
    try:
        scfg = SynthConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synth config: {exc}") from None
    with atomic_dir(args.out) as tmp:
        generate_dataset(scfg, tmp, threshold)
    log.info("wrote %d subjects to %s", 2 * scfg.subjects_per_class, args.out)


def _encode_subject(job):
    root, subj, threshold, k_hops, renormalize, out = job
    src = root / subj["timeseries"]
    g = build_graph(read_series_csv(src, str(subj["id"])), threshold)
    f = graph_factors(g)
    e = long_range_embedding(rw_kernel(f, g.a, renormalize), k_hops)
    manifest = write_graph_cache(out, g, threshold, file_sha256(src))
    write_matrix_csv(out / "F.csv", f)
    write_matrix_csv(out / "E.csv", e)
    manifest.update({"k_hops": k_hops, "renormalize": renormalize, "label": int(subj["label"])})
    write_json(out / "manifest.json", manifest)


def cmd_encode(args) -> None:
    opts = {"threshold": DEFAULT_THRESHOLD, "k_hops": 16, "renormalize": False}
    extra = parse_overrides(args.set)
    unknown = set(extra) - set(opts)
    if unknown:
        raise CliError(f"unknown encode options: {sorted(unknown)}")
    opts.update(extra)
    if int(opts["k_hops"]) < 1:
        raise CliError("k_hops must be >= 1")
    root = _require_dataset({"dataset": args.dataset})
    manifest = read_manifest(root)
    with atomic_dir(args.out) as tmp:
        jobs = [(root, s, float(opts["threshold"]), int(opts["k_hops"]), bool(opts["renormalize"]),
                 tmp / str(s["id"])) for s in manifest["subjects"]]
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            list(pool.map(_encode_subject, jobs))
        write_json(tmp / "encode.json", {"dataset": str(root), "subjects": len(jobs), **opts})


def _metrics_doc(record, run: dict) -> dict:
    return {
        "seed": record.seed,
        "config_hash": record.config_hash,
        "best_epoch": record.best_epoch,
        "best_val_auc": record.best_val_auc,
        "test": record.test_metrics,
        "train_loss": record.train_loss,
        "val": record.val_metrics,
        "dataset": run["dataset"],
    }


def _train_meta(run: dict, data: EncodedData) -> dict:
    return {"dataset": str(run["dataset"]), "threshold": float(run["threshold"]),
            "renormalize": bool(run["renormalize"]),
            "n_features": int(data.x.shape[-1]), "n_nodes": int(data.x.shape[-2])}


def cmd_train(args) -> None:
    run, model_cfg, train_cfg = split_run_config(load_config(args.config, parse_overrides(args.set), args.seed))
    data = _encode(run, model_cfg.k_hops)
    with atomic_dir(args.out) as tmp:
        write_json(tmp / "config.json", effective_config(run, model_cfg, train_cfg))
        record = train_loop(data, model_cfg, train_cfg, run_dir=tmp, extra_meta=_train_meta(run, data))
        write_json(tmp / "metrics.json", _metrics_doc(record, run))
    log.info("test auc %.4f (best epoch %d)", record.test_metrics.get("auc", math.nan), record.best_epoch)


def cmd_eval(args) -> None:
    model, meta = _model_from_checkpoint(args.checkpoint)
    run = {"dataset": meta.get("dataset"), "threshold": meta.get("threshold", DEFAULT_THRESHOLD),
           "renormalize": meta.get("renormalize", False)}
    run.update({k: v for k, v in parse_overrides(args.set).items() if k in ("dataset", "threshold")})
    data = _encode(run, model.config.k_hops)
    if args.split == "all":
        subset = data
    else:
        split = SplitIndices(**meta["split"])
        subset = data.subset(getattr(split, args.split))
    if len(subset) == 0:
        raise CliError(f"split {args.split!r} is empty")
    metrics = evaluate(model, subset)
    with atomic_dir(args.out) as tmp:
        write_json(tmp / "metrics.json", {"checkpoint": str(args.checkpoint), "split": args.split,
                                          "n": len(subset), **metrics.to_dict()})


def parse_hops(raw: str) -> list[int]:
    try:
        hops = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--hops must be comma-separated integers, got {raw!r}") from None
    if not hops or min(hops) < 1:
        raise CliError("--hops needs positive integers")
    return hops


def cmd_sweep(args) -> None:
    run, model_cfg, train_cfg = split_run_config(load_config(args.config, parse_overrides(args.set), args.seed))
    hops = parse_hops(args.hops)
    ds = load_dataset(_require_dataset(run), float(run["threshold"]))
    rows = []
    with atomic_dir(args.out) as tmp:
        write_json(tmp / "config.json", {**effective_config(run, model_cfg, train_cfg), "hops": hops})
        for k in hops:
            data = encode_dataset(ds, k, bool(run["renormalize"]))
            mcfg = ModelConfig(**{**model_cfg.to_dict(), "k_hops": k})
            records = []
            for seed in run["seeds"]:
                tcfg = TrainConfig(**{**asdict(train_cfg), "seed": int(seed)})
                records.append(train_loop(data, mcfg, tcfg, extra_meta=_train_meta(run, data)))
                log.info("K=%d seed=%d test auc %.4f", k, seed, records[-1].test_metrics["auc"])
            rows.append({"k_hops": k, **summarize(records),
                         "runs": [r.test_metrics for r in sorted(records, key=lambda r: r.seed)]})
        write_json(tmp / "summary.json", {"rows": rows})
        lines = ["k_hops,n_seeds," + ",".join(f"{m}_mean,{m}_std" for m in ("acc", "auc", "sen", "spe", "f1"))]
        for row in rows:
            cells = [str(row["k_hops"]), str(len(row["seeds"]))]
            for m in ("acc", "auc", "sen", "spe", "f1"):
                cells += [repr(row[m]["mean"]), repr(row[m]["std"])]
            lines.append(",".join(cells))
        (tmp / "summary.csv").write_text("\n".join(lines) + "\n")


def cmd_attn(args) -> None:
    model, meta = _model_from_checkpoint(args.checkpoint)
    run = {"dataset": meta.get("dataset"), "threshold": meta.get("threshold", DEFAULT_THRESHOLD),
           "renormalize": meta.get("renormalize", False)}
    run.update({k: v for k, v in parse_overrides(args.set).items() if k in ("dataset", "threshold")})
    data = _encode(run, model.config.k_hops)
    if args.subject not in data.ids:
        raise CliError(f"unknown subject {args.subject!r}")
    i = data.ids.index(args.subject)
    _, record = model.forward(data.x[i], data.e[i])
    with atomic_dir(args.out) as tmp:
        if args.per_head:
            for m in range(model.config.heads):
                mat = export_attention(record, head=m)
                write_matrix_csv(tmp / f"attn_{args.subject}_head{m}.csv", mat)
                write_pgm(tmp / f"attn_{args.subject}_head{m}.pgm", mat)
        else:
            mat = export_attention(record, args.reduction)
            write_matrix_csv(tmp / f"attn_{args.subject}.csv", mat)
            write_pgm(tmp / f"attn_{args.subject}.pgm", mat)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alter", description="Long-range walk embeddings for brain-graph classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("encode", help="write X/A/F/E caches per subject")
    sp.add_argument("dataset")
    common(sp, config=False)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on its recorded split")
    sp.add_argument("checkpoint")
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train across hop counts and seeds")
    sp.add_argument("--hops", default=",".join(map(str, DEFAULT_HOPS)))
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("attn", help="export a subject's attention map")
    sp.add_argument("checkpoint")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--reduction", choices=("mean", "max"), default="mean")
    sp.add_argument("--per-head", action="store_true")
    common(sp, config=False)
    sp.set_defaults(func=cmd_attn)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"alter {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"alter {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
