"""Synthetic benchmark: SUM, its four ablations, RUM and GRU over several seeds.

    python3 scripts/run_benchmark.py --seeds 0 1 2 --out runs/benchmark

Writes benchmark_runs.csv (one row per run) and benchmark.csv (medians).
"""
import argparse
import dataclasses
import time
from pathlib import Path

import numpy as np

from sumrec.config import load_config
from sumrec.data import generate_synthetic
from sumrec.encoder import ABLATIONS
from sumrec.metrics import format_table, rows_to_csv
from sumrec.trainer import evaluate_samples, train

ROOT = Path(__file__).resolve().parents[1]


def variants():
    for label, flags in ABLATIONS.items():
        yield label, {"encoder_kind": "sum", "flags": flags}
    yield "RUM", {"encoder_kind": "rum"}
    yield "GRU", {"encoder_kind": "gru"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs/benchmark.ini"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--only", nargs="*", help="subset of model labels")
    ap.add_argument("--out", default="runs/benchmark")
    args = ap.parse_args()
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        ds = generate_synthetic(dataclasses.replace(cfg.data, seed=seed))
        for label, changes in variants():
            if args.only and label not in args.only:
                continue
            tc = dataclasses.replace(cfg.train, seed=seed, **changes)
            start = time.perf_counter()
            res = train(tc, ds)
            test = evaluate_samples(res.model, ds["test"], ds.items, tc.max_len)
            rows.append({"model": label, "seed": seed, "gauc": test.gauc, "ndcg3": test.ndcg3,
                         "logloss": test.logloss, "best_epoch": res.best_epoch,
                         "seconds": round(time.perf_counter() - start, 1)})
            print(f"seed {seed}  {label:<24} gAUC {test.gauc:.4f}  NDCG@3 {test.ndcg3:.4f}"
                  f"  ({rows[-1]['seconds']}s)", flush=True)
            (out / "benchmark_runs.csv").write_text(rows_to_csv(rows))
    summary = []
    for label in dict.fromkeys(r["model"] for r in rows):
        mine = [r for r in rows if r["model"] == label]
        summary.append({"model": label, **{m: float(np.median([r[m] for r in mine]))
                                           for m in ("gauc", "ndcg3", "logloss")}, "seeds": len(mine)})
    (out / "benchmark.csv").write_text(rows_to_csv(summary))
    print(format_table(summary, ["model", "gauc", "ndcg3", "logloss", "seeds"]))


if __name__ == "__main__":
    main()
