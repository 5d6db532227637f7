"""apply_event throughput of the serving engine, single process.

    python3 scripts/serving_throughput.py --users 1000 --events 20000 --threads 4

Uses a randomly initialized SUM model at D=64, K=5 with raw embeddings as
events. Prints events/s and score requests/s.
"""
import argparse
import threading
import time

import numpy as np

from sumrec.model import build_model
from sumrec.serving import EventMessage, ScoreRequest, ServingEngine


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--users", type=int, default=1000)
    ap.add_argument("--events", type=int, default=20000)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    engine = ServingEngine(build_model("sum", args.d, args.k, rng))
    users = rng.integers(0, args.users, args.events)
    xs = rng.normal(size=(args.events, args.d))
    msgs = [EventMessage(f"u{u}", t, embedding=x) for t, (u, x) in enumerate(zip(users, xs))]
    chunks = [msgs[i::args.threads] for i in range(args.threads)]

    def apply(chunk):
        for m in chunk:
            engine.apply_event(m)

    threads = [threading.Thread(target=apply, args=(c,)) for c in chunks]
    start = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - start
    print(f"apply_event: {args.events / elapsed:,.0f} events/s ({args.threads} thread(s), D={args.d}, K={args.k})")

    cands = [list(v) for v in rng.normal(size=(10, args.d))]
    n = 500
    start = time.perf_counter()
    for i in range(n):
        engine.score(ScoreRequest(f"u{i % args.users}", cands))
    elapsed = time.perf_counter() - start
    print(f"score: {n / elapsed:,.0f} requests/s with 10 candidates each")


if __name__ == "__main__":
    main()
