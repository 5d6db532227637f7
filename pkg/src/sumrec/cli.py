"""Command-line entry points: gen-data, train, eval, ablate, sweep-k, inspect, serve."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .analytics import channel_utilization, heatmap_csv, readout_attention_profile
from .config import RunConfig, load_config
from .data import SPLITS, Dataset, generate_synthetic, ingest_taobao, load_dataset, save_dataset
from .encoder import ABLATIONS, AblationFlags
from .metrics import format_table, rows_to_csv
from .model import load_checkpoint, save_checkpoint
from .serving import ObjectStore, ServingEngine
from .trainer import TrainConfig, collect_traces, evaluate_samples, make_groups, train

log = logging.getLogger("sumrec")

SWEEP_KS = (3, 4, 5, 8, 10)


class CommandError(Exception):
    """User-facing failure; printed without a traceback, exit code 1."""


class OutputDir:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, path: str):
        self.path = Path(path)
        self.created_dir = not self.path.exists()
        self.written: List[Path] = []

    def file(self, name: str) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        p = self.path / name
        self.written.append(p)
        return p

    def write(self, name: str, text: str) -> Path:
        p = self.file(name)
        p.write_text(text)
        return p

    def cleanup(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
        if self.created_dir and self.path.exists() and not any(self.path.iterdir()):
            self.path.rmdir()


# ---------------------------------------------------------------- arguments


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-style config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder", choices=["sum", "rum", "gru"])
    p.add_argument("--k", type=int, help="number of channels")
    p.add_argument("--d", type=int, help="embedding / state dimension")
    p.add_argument("--beta", type=float, help="attention softmax scale")
    p.add_argument("--no-instance-att", action="store_true")
    p.add_argument("--no-debuff", action="store_true")
    p.add_argument("--no-highway", action="store_true")
    p.add_argument("--legacy-read", action="store_true")
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sumrec", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset or ingest a Taobao log")
    _add_common(p)
    p.add_argument("--taobao", help="Taobao behavior CSV to ingest instead of generating")
    p.add_argument("--users", type=int, help="synthetic user count")

    p = sub.add_parser("train", help="train an encoder + ranker")
    _add_common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)

    for name, help_text in [("ablate", "train full SUM and the four single-component ablations"),
                            ("sweep-k", "train SUM and RUM over several channel counts")]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--seeds", type=int, default=1, help="number of seeds per variant")
        if name == "sweep-k":
            p.add_argument("--ks", default=",".join(map(str, SWEEP_KS)))

    p = sub.add_parser("inspect", help="export attention heatmap, utilization and readout profile")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--max-users", type=int, default=50, help="users in the heatmap export")

    p = sub.add_parser("serve", help="run the line-delimited JSON serving loop")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset supplying item ids for fixed-embedding models")
    p.add_argument("--restore", help="snapshot to load at startup")
    p.add_argument("--port", type=int, help="TCP port; omit for stdin/stdout pipe mode")
    p.add_argument("--host")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    tc = cfg.train
    flags = tc.flags
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
        cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
    if args.encoder:
        changes["encoder_kind"] = args.encoder
    if args.k is not None:
        changes["K"] = args.k
    if args.d is not None:
        changes["D"] = args.d
        cfg.data = dataclasses.replace(cfg.data, D=args.d)
    if args.beta is not None:
        changes["beta"] = args.beta
    if args.epochs is not None:
        changes["max_epochs"] = args.epochs
    if args.lr is not None:
        changes["learning_rate"] = args.lr
    flags = dataclasses.replace(
        flags,
        instance_level_attention=flags.instance_level_attention and not args.no_instance_att,
        local_proximity_debuff=flags.local_proximity_debuff and not args.no_debuff,
        highway_channel=flags.highway_channel and not args.no_highway,
        legacy_read=flags.legacy_read or args.legacy_read,
    )
    cfg.train = dataclasses.replace(tc, flags=flags, **changes)
    if getattr(args, "users", None):
        cfg.data = dataclasses.replace(cfg.data, n_users=args.users)
    if getattr(args, "port", None) is not None:
        cfg.serve.port = args.port
    if getattr(args, "host", None):
        cfg.serve.host = args.host
    return cfg


def _load_data(path: str) -> Dataset:
    if not Path(path).exists():
        raise CommandError(f"dataset not found: {path}")
    return load_dataset(path)


def _train_config_for(cfg: RunConfig, ds: Dataset) -> TrainConfig:
    tc = cfg.train
    if ds.items.learned:
        return dataclasses.replace(tc, D=ds.D)
    if tc.D != ds.D:
        # an explicit D that disagrees with the data is a user error; the default just follows the data
        if tc.D != TrainConfig().D:
            raise CommandError(f"--d {tc.D} does not match dataset D={ds.D}")
        return dataclasses.replace(tc, D=ds.D)
    return tc


def _load_model(path: str, cfg: RunConfig, args, ds: Optional[Dataset] = None):
    if not Path(path).exists():
        raise CommandError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    if args.k is not None and args.k != model.K:
        raise CommandError(f"--k {args.k} does not match checkpoint K={model.K}")
    if args.d is not None and args.d != model.D:
        raise CommandError(f"--d {args.d} does not match checkpoint D={model.D}")
    if ds is not None and ds.D != model.D:
        raise CommandError(f"dataset D={ds.D} does not match checkpoint D={model.D}")
    return model


# ----------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig, out: OutputDir) -> Dict[str, object]:
    if args.taobao:
        if not Path(args.taobao).exists():
            raise CommandError(f"Taobao CSV not found: {args.taobao}")
        ds, report = ingest_taobao(args.taobao, max_len=cfg.train.max_len, seed=cfg.train.seed,
                                   item_dim=cfg.train.item_dim, category_dim=cfg.train.category_dim)
        info = dataclasses.asdict(report)
    else:
        ds = generate_synthetic(cfg.data)
        info = {}
    path = out.file("dataset.txt")
    save_dataset(ds, path)
    counts = {s: len(ds[s]) for s in SPLITS}
    print(f"wrote {path} (D={ds.D}, items={len(ds.items)}, " + ", ".join(f"{k}={v}" for k, v in counts.items()) + ")")
    return {"dataset": str(path), "counts": counts, **info}


def _fit(tc: TrainConfig, ds: Dataset):
    res = train(tc, ds, progress=lambda r: log.info(
        "epoch %d  loss %.4f  valid gAUC %.4f  NDCG@3 %.4f", r.epoch, r.train_loss, r.valid_gauc, r.valid_ndcg3))
    test = evaluate_samples(res.model, ds["test"], ds.items, tc.max_len)
    return res, test


def cmd_train(args, cfg: RunConfig, out: OutputDir) -> Dict[str, object]:
    ds = _load_data(args.data)
    tc = _train_config_for(cfg, ds)
    res, test = _fit(tc, ds)
    ckpt = out.file("checkpoint.json")
    save_checkpoint(res.model, ckpt)
    out.write("history.csv", res.history_csv())
    print(test.table(f"test metrics ({tc.encoder_kind}, best epoch {res.best_epoch})"))
    return {"checkpoint": str(ckpt), "best_epoch": res.best_epoch,
            "valid_gauc": res.best_valid_gauc, "test": test.as_row()}


def cmd_eval(args, cfg: RunConfig, out: OutputDir) -> Dict[str, object]:
    ds = _load_data(args.data)
    model = _load_model(args.checkpoint, cfg, args, ds)
    report = evaluate_samples(model, ds[args.split], ds.items, cfg.train.max_len)
    print(report.table(f"{args.split} metrics"))
    out.write("eval.csv", rows_to_csv([{"split": args.split, **report.as_row()}]))
    return {"checkpoint": args.checkpoint, "metrics": report.as_row()}


def _variant_rows(tc: TrainConfig, ds: Dataset, variants, seeds: int, extra=None):
    rows = []
    for label, changes in variants:
        for s in range(seeds):
            run_tc = dataclasses.replace(tc, seed=tc.seed + s, **changes)
            start = time.perf_counter()
            res, test = _fit(run_tc, ds)
            row = {"model": label, "seed": run_tc.seed, "K": run_tc.K, "gauc": test.gauc,
                   "ndcg3": test.ndcg3, "logloss": test.logloss, "best_epoch": res.best_epoch,
                   "seconds": round(time.perf_counter() - start, 1)}
            if extra:
                row.update(extra(res, run_tc))
            rows.append(row)
            log.info("%s seed %d: gAUC %.4f", label, run_tc.seed, test.gauc)
    return rows


def _median_rows(rows, keys=("model", "K")):
    summary: Dict[tuple, List[dict]] = {}
    for r in rows:
        summary.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, members in summary.items():
        row = dict(zip(keys, key))
        for m in ("gauc", "ndcg3", "logloss"):
            row[m] = float(np.median([x[m] for x in members]))
        if "utilization" in members[0]:
            row["utilization"] = float(np.median([x["utilization"] for x in members]))
        row["seeds"] = len(members)
        out.append(row)
    return out


def cmd_ablate(args, cfg: RunConfig, out: OutputDir) -> Dict[str, object]:
    ds = _load_data(args.data)
    tc = dataclasses.replace(_train_config_for(cfg, ds), encoder_kind="sum")
    variants = [(label, {"flags": flags}) for label, flags in ABLATIONS.items()]
    rows = _variant_rows(tc, ds, variants, args.seeds)
    summary = _median_rows(rows)
    out.write("ablation_runs.csv", rows_to_csv(rows))
    out.write("ablation.csv", rows_to_csv(summary))
    print(format_table(summary, ["model", "gauc", "ndcg3", "logloss", "seeds"]))
    return {"rows": summary}


def _utilization(res, tc: TrainConfig, ds: Dataset) -> float:
    groups = make_groups(ds["test"], tc.max_len)
    writes, _, _ = collect_traces(res.model, groups, ds.items)
    return channel_utilization(writes, res.model.K, highway=res.model.flags.highway_channel)


def cmd_sweep_k(args, cfg: RunConfig, out: OutputDir) -> Dict[str, object]:
    ds = _load_data(args.data)
    tc = _train_config_for(cfg, ds)
    try:
        ks = [int(k) for k in args.ks.split(",")]
    except ValueError:
        raise CommandError(f"--ks must be a comma-separated list of integers, got {args.ks!r}") from None
    variants = []
    for k in ks:
        variants.append(("SUM", {"K": k, "encoder_kind": "sum"}))
        variants.append(("RUM", {"K": k, "encoder_kind": "rum"}))
    rows = _variant_rows(tc, ds, variants, args.seeds,
                         extra=lambda res, run_tc: {"utilization": _utilization(res, run_tc, ds)})
    summary = _median_rows(rows)
    out.write("sweep_k_runs.csv", rows_to_csv(rows))
    out.write("sweep_k.csv", rows_to_csv(summary))
    print(format_table(summary, ["model", "K", "gauc", "ndcg3", "utilization", "seeds"]))
    return {"rows": summary}


def cmd_inspect(args, cfg: RunConfig, out: OutputDir) -> Dict[str, object]:
    ds = _load_data(args.data)
    model = _load_model(args.checkpoint, cfg, args, ds)
    if model.kind == "gru":
        raise CommandError("inspect needs a channel encoder (sum or rum); the checkpoint is a GRU")
    groups = make_groups(ds[args.split], cfg.train.max_len)
    writes, reads, users = collect_traces(model, groups, ds.items)
    util = channel_utilization(writes, model.K, highway=model.flags.highway_channel)
    profile = readout_attention_profile(reads)
    out.write("heatmap.csv", heatmap_csv(writes[:args.max_users], users[:args.max_users], model.K))
    out.write("readout_profile.csv", rows_to_csv(
        [{"channel": k, "highway": bool(model.flags.highway_channel and k == model.K - 1),
          "proportion": float(p)} for k, p in enumerate(profile)]))
    out.write("utilization.csv", rows_to_csv([{"K": model.K, "utilization": util, "users": len(writes)}]))
    print(f"writing utilization: {util:.4f}")
    print("readout profile:", " ".join(f"{p:.3f}" for p in profile))
    return {"utilization": util, "readout_profile": [float(p) for p in profile]}


def cmd_serve(args, cfg: RunConfig, out: OutputDir) -> Dict[str, object]:
    ds = _load_data(args.data) if args.data else None
    model = _load_model(args.checkpoint, cfg, args, ds)
    store = None
    if args.restore:
        store = ObjectStore.restore(args.restore)
    engine = ServingEngine(model, store, ds.items if ds else None)
    if cfg.serve.port:
        server = engine.serve_tcp(cfg.serve.host, cfg.serve.port)
        print(f"serving on {cfg.serve.host}:{server.server_address[1]}", file=sys.stderr)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return {"mode": "tcp", "port": cfg.serve.port}
    n = engine.serve_pipe(sys.stdin, sys.stdout)
    return {"mode": "pipe", "requests": n, "users": len(engine.store)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-k": cmd_sweep_k,
    "inspect": cmd_inspect,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    out = OutputDir(args.out)
    start = time.perf_counter()
    try:
        cfg = resolve_config(args)
        cfg.train.validate()
        result = COMMANDS[args.command](args, cfg, out)
        manifest = {
            "command": args.command,
            "argv": list(argv if argv is not None else sys.argv[1:]),
            "config": cfg.as_dict(),
            "seed": cfg.train.seed,
            "checkpoint": getattr(args, "checkpoint", None) or result.get("checkpoint"),
            "results": result,
            "timings": {"wall_seconds": round(time.perf_counter() - start, 3)},
        }
        # serve writes to stdout; keep its manifest out of the pipe
        out.write("manifest.json" if args.command != "serve" else "serve_manifest.json",
                  json.dumps(manifest, indent=2, default=str) + "\n")
        return 0
    except (CommandError, ValueError, FileNotFoundError, RuntimeError) as err:
        out.cleanup()
        print(f"sumrec {args.command}: error: {err}", file=sys.stderr)
        return 1
    except BaseException:
        out.cleanup()
        raise


if __name__ == "__main__":
    sys.exit(main())
