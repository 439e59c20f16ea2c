"""Compiled vs numpy kernels, per call and end to end.

    python benchmarks/bench_kernels.py [--repeat N]

Per-kernel timings call both backend modules directly. The end-to-end number
runs one protocol in a subprocess per backend (FDLORA_PURE_PYTHON=1 forces
the fallback).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fdlora import kernels

END_TO_END = (
    "import time; from fdlora.federation import FederationConfig, run_fdlora; "
    "from fdlora import kernels; t = time.perf_counter(); "
    "run_fdlora(FederationConfig(num_clients=5, outer_rounds=10, inner_lr=0.01)); "
    "print(kernels.BACKEND, time.perf_counter() - t)"
)


def cases(rng):
    """(label, fn(module)) pairs at the shapes a desk-scale run actually sees."""
    x1, w = rng.normal(size=(1, 12)), rng.normal(size=(12, 32))
    x64 = rng.normal(size=(64, 12))
    logits, labels = rng.normal(size=(1, 4)), np.array([2], dtype=np.int64)
    logits64, labels64 = rng.normal(size=(64, 4)), rng.integers(0, 4, 64).astype(np.int64)
    p, g, m, v = (rng.uniform(size=(32, 4)) for _ in range(4))
    return [
        ("matmul 1x12 @ 12x32", lambda k: k.matmul(x1, w)),
        ("matmul 64x12 @ 12x32", lambda k: k.matmul(x64, w)),
        ("softmax_xent 1x4", lambda k: k.softmax_xent(logits, labels, 1.0)),
        ("softmax_xent 64x4", lambda k: k.softmax_xent(logits64, labels64, 1 / 64)),
        ("adamw_update 32x4", lambda k: k.adamw_update(p, g, m, v, 0.01, 0.9, 0.999, 1e-8, 0.01, 5)),
        ("nesterov_update 32x4", lambda k: k.nesterov_update(p, g, m, 0.7, 0.5)),
    ]


def per_call_us(fn, module, repeat):
    number = 2000
    best = min(timeit.repeat(lambda: fn(module), number=number, repeat=repeat))
    return best / number * 1e6


def end_to_end(pure):
    env = dict(os.environ)
    env.pop("FDLORA_PURE_PYTHON", None)
    if pure:
        env["FDLORA_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available")
    names = sorted(backends, reverse=True)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases(rng):
        t = {n: per_call_us(fn, backends[n], args.repeat) for n in names}
        speed = f"{t['python'] / t['cython']:.2f}x" if "cython" in t else "-"
        print(f"{label:<24}" + "".join(f"{t[n]:>14.2f}" for n in names) + f"{speed:>10}")
    print()
    results = [end_to_end(pure) for pure in ((False, True) if "cython" in backends else (True,))]
    for name, secs in results:
        print(f"run N=5 T=10 ({name}): {secs:.2f} s")
    if len(results) == 2:
        print(f"end-to-end speedup: {results[1][1] / results[0][1]:.2f}x")


if __name__ == "__main__":
    main()
