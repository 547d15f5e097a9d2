"""Wall-clock comparison of the numba and numpy kernels.

    python3 benchmarks/bench_kernels.py [--paths 200000] [--repeat 5]

The first numba call compiles (or loads the on-disk cache); it is timed
separately and excluded from the steady-state figures.
"""

import argparse
import time

import numpy as np

from rskelly import _kernels
from rskelly.controls import saddle_gains
from rskelly.model import ExplorationSchedule, MarketParams
from rskelly.riccati import solve
from rskelly.simulator import _rollout_args, draw_noise_batch, initial_states


def instance(K):
    rng = np.random.default_rng(0)
    m, n = 3, 2
    d = m + n + 1
    Sigma = 0.4 * rng.normal(size=(m, d))
    Sigma[:, :m] += 0.5 * np.eye(m)
    params = MarketParams(a=0.1 * rng.normal(size=m), A=0.3 * rng.normal(size=(m, n)), Sigma=Sigma,
                          b=0.05 * rng.normal(size=n), B=-0.5 * np.eye(n), Lambda=0.2 * rng.normal(size=(n, d)),
                          c=0.01, C=0.1 * rng.normal(size=n), Xi=0.1 * rng.normal(size=d), dt=0.1, K=K, theta=1.0)
    psi = ExplorationSchedule.fraction_of_bound(params, 0.5)
    return params, psi, solve(params, psi)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=200_000)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    _kernels.configure_threads()
    params, psi, qv = instance(args.steps)
    g = saddle_gains(params, qv)
    zeros = (np.zeros((params.K, params.m, params.n)), np.zeros((params.K, params.m)))
    streams = np.arange(args.paths, dtype=np.uint64)
    w, vs = draw_noise_batch(params, 1, streams, "numpy")
    X0 = initial_states(params, np.zeros(params.n), args.paths)
    rargs = _rollout_args(params, psi, [(g.D, g.dvec), (g.E, g.evec), zeros], X0, w, vs)

    t0 = time.perf_counter()
    _kernels.normals(1, streams[:10], 0, 2, 2, which="numba")
    _kernels.rollout(_rollout_args(params, psi, [(g.D, g.dvec), (g.E, g.evec), zeros], X0[:10], w[:10], vs[:10]),
                     which="numba")
    warm = time.perf_counter() - t0

    rows = []
    for name, fn in [
        ("normals", lambda b: _kernels.normals(1, streams, 0, params.K, params.d, which=b)),
        ("rollout", lambda b: _kernels.rollout(rargs, which=b)),
    ]:
        tn = best_of(lambda: fn("numpy"), args.repeat)
        tb = best_of(lambda: fn("numba"), args.repeat)
        rows.append((name, tn, tb))
    a = _kernels.rollout(rargs, which="numpy")
    b = _kernels.rollout(rargs, which="numba")
    diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))

    print(f"paths={args.paths} K={params.K} m={params.m} n={params.n} d={params.d}")
    print(f"numba compile/cache load: {warm:.2f} s")
    print(f"{'kernel':<10}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for name, tn, tb in rows:
        print(f"{name:<10}{tn:>12.4f}{tb:>12.4f}{tn / tb:>10.1f}")
    print(f"max |numpy - numba| over rollout outputs: {diff:.2e}")


if __name__ == "__main__":
    main()
