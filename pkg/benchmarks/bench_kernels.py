"""Compare the compiled kernels against their pure-Python twins.

    python benchmarks/bench_kernels.py [--repeats 5]

Prints median wall time per call for each kernel and backend, the speed-up,
and the largest output difference between the two backends.
"""

import argparse
import statistics
import time

import numpy as np

from blockamd import _pykernels
from blockamd.kernels import compiled_backend


def _logprobs(rng, T, V):
    x = rng.normal(size=(T, V))
    return np.ascontiguousarray(x - np.logaddexp.reduce(x, axis=1, keepdims=True))


def workloads(rng):
    lp = _logprobs(rng, 200, 40)
    target = rng.integers(1, 40, size=40)
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    prev_nb = np.ascontiguousarray(np.log(rng.random(200)))
    prev_b = np.ascontiguousarray(np.log(rng.random(200)))
    ref = rng.integers(0, 30, size=60).astype(np.int64)
    hyp = rng.integers(0, 30, size=55).astype(np.int64)
    return {
        "ctc_alpha_beta (T=200, S=81)": ("ctc_alpha_beta", (lp, ext)),
        "prefix_extend (T=200)": ("prefix_extend", (lp, prev_nb, prev_b, 7, 0, False, False)),
        "edit_distance (60 x 55)": ("edit_distance", (ref, hyp)),
    }


def time_call(fn, args, repeats):
    fn(*args)
    runs = []
    for _ in range(repeats):
        n, t0 = 0, time.perf_counter()
        while time.perf_counter() - t0 < 0.2:
            fn(*args)
            n += 1
        runs.append((time.perf_counter() - t0) / n)
    return statistics.median(runs)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    both_inf = np.isinf(a) & np.isinf(b) & (np.sign(a) == np.sign(b))
    with np.errstate(invalid="ignore"):
        return float(np.abs(np.where(both_inf, 0.0, a - b)).max(initial=0.0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if compiled_backend is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'python':>12s} {'cython':>12s} {'speed-up':>9s} {'max diff':>9s}")
    for label, (name, call_args) in workloads(rng).items():
        py, cy = getattr(_pykernels, name), getattr(compiled_backend, name)
        t_py = time_call(py, call_args, args.repeats)
        t_cy = time_call(cy, call_args, args.repeats)
        diff = max_diff(py(*call_args), cy(*call_args))
        print(f"{label:32s} {t_py * 1e6:10.1f}us {t_cy * 1e6:10.1f}us {t_py / t_cy:8.1f}x {diff:9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
