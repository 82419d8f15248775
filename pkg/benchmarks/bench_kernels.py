"""Time the LSTMP recurrence kernels: numba vs the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--frames 200] [--repeats 5]

Prints one tab-separated row per (size, direction) with the best-of-N
wall time of each backend, the speedup and the largest absolute difference
between their outputs.
"""

import argparse
import time

import numpy as np

from cyclese import _kernels as K

SIZES = {"desk (64/32)": (64, 32, 87), "full (512/256)": (512, 256, 87)}


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(hidden, proj, n_in, frames, repeats, rng):
    w_in = rng.uniform(-0.1, 0.1, (4 * hidden, n_in))
    w_rec = rng.uniform(-0.1, 0.1, (4 * hidden, proj))
    w_proj = rng.uniform(-0.1, 0.1, (proj, hidden))
    zx = rng.normal(size=(frames, n_in)) @ w_in.T
    d_proj = rng.normal(size=(frames, proj))

    fwd_np = K.forward_numpy(zx, w_rec, w_proj)
    fwd_nb = K.forward_numba(zx, w_rec, w_proj)  # also triggers compilation
    bwd_np = K.backward_numpy(d_proj, *fwd_np[:3], w_rec, w_proj)
    bwd_nb = K.backward_numba(d_proj, *fwd_nb[:3], w_rec, w_proj)

    rows = []
    t_np = best_of(lambda: K.forward_numpy(zx, w_rec, w_proj), repeats)
    t_nb = best_of(lambda: K.forward_numba(zx, w_rec, w_proj), repeats)
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(fwd_np, fwd_nb))
    rows.append(("forward", t_np, t_nb, diff))
    t_np = best_of(lambda: K.backward_numpy(d_proj, *fwd_np[:3], w_rec, w_proj), repeats)
    t_nb = best_of(lambda: K.backward_numba(d_proj, *fwd_nb[:3], w_rec, w_proj), repeats)
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(bwd_np, bwd_nb))
    rows.append(("backward", t_np, t_nb, diff))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba unavailable (or CYCLESE_DISABLE_NUMBA is set); nothing to compare")
    rng = np.random.default_rng(0)
    print("size\tpass\tnumpy_ms\tnumba_ms\tspeedup\tmax_abs_diff")
    for label, (h, p, n_in) in SIZES.items():
        for name, t_np, t_nb, diff in bench(h, p, n_in, args.frames, args.repeats, rng):
            print(f"{label}\t{name}\t{1e3 * t_np:.2f}\t{1e3 * t_nb:.2f}\t{t_np / t_nb:.1f}x\t{diff:.1e}")


if __name__ == "__main__":
    main()
