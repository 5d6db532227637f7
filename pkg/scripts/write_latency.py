"""Mean single-event write latency against the channel count.

    python3 scripts/write_latency.py --d 128 --ks 5 10 20 40

The gate projections are shared by all channels, so latency should grow far
slower than K.
"""
import argparse
import time

import numpy as np

from sumrec.encoder import AblationFlags, SumEncoder, SumParams, write_flops


def mean_write_seconds(D, K, n=2000, warmup=100, seed=0):
    rng = np.random.default_rng(seed)
    enc = SumEncoder(SumParams.init(D, K, rng), AblationFlags())
    xs = rng.normal(size=(n + warmup, D))
    state = enc.init_state()
    for x in xs[:warmup]:
        state = enc.write(state, x)
    start = time.perf_counter()
    for x in xs[warmup:]:
        state = enc.write(state, x)
    return (time.perf_counter() - start) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=128)
    ap.add_argument("--ks", type=int, nargs="+", default=[5, 10, 20, 40])
    ap.add_argument("--n", type=int, default=2000)
    args = ap.parse_args()
    base = None
    print(f"{'K':>4} {'us/write':>10} {'ratio':>7} {'flops':>9}")
    for K in args.ks:
        t = mean_write_seconds(args.d, K, args.n)
        base = base or t
        print(f"{K:>4} {t * 1e6:>10.1f} {t / base:>7.2f} {write_flops(args.d, K)['total']:>9}")


if __name__ == "__main__":
    main()
