"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called with identical inputs on both backends; the table
reports the best wall time of ``--repeat`` calls and the speedup.
"""
import argparse
import time

import numpy as np

from articmpc import _fallback
from articmpc.geometry import matrix_from_rotvec

try:
    from articmpc import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def case_edt(rng):
    src = np.ascontiguousarray(rng.random((40, 40, 20)) < 0.03, dtype=np.uint8)
    return "squared_edt 40x40x20", lambda impl: impl.squared_edt(src)


def case_raycast(rng):
    shape = (36, 36, 20)
    start = np.array([18.2, 17.9, 10.1])
    ends = start + rng.uniform(-20, 20, (3000, 3))

    def run(impl):
        hit = np.zeros(shape, dtype=np.uint8)
        miss = np.zeros(shape, dtype=np.uint8)
        impl.raycast_mark(hit, miss, start, ends)
    return "raycast_mark 3000 rays", run


def case_rollout(rng, N=100):
    lower = np.array([-1.0, -1.0] + [-1.2] * 6)
    x0 = rng.normal(size=9)
    u_ff = rng.uniform(-1.5, 1.5, (N, 8))
    K = rng.normal(scale=0.3, size=(N, 8, 9))
    x_nom = rng.normal(size=(N + 1, 9))

    def run(impl):
        X, U = np.zeros((N + 1, 9)), np.zeros((N, 8))
        impl.rollout_diffdrive(x0, u_ff, K, x_nom, lower, -lower, 0.05, X, U)
    return f"rollout_diffdrive N={N}", run


def case_riccati(rng, N=100, nx=9, nu=8):
    A = np.eye(nx) + 0.05 * rng.normal(size=(N, nx, nx))
    B = 0.05 * rng.normal(size=(N, nx, nu))
    qx, qu = rng.normal(size=(N + 1, nx)), rng.normal(size=(N + 1, nu))
    M = rng.normal(size=(N + 1, nx, nx))
    Qxx = np.einsum("kij,klj->kil", M, M) + np.eye(nx)
    Quu = np.repeat(np.eye(nu)[None], N + 1, axis=0)
    Qux = 0.1 * rng.normal(size=(N + 1, nu, nx))

    def run(impl):
        K, kff = np.zeros((N, nu, nx)), np.zeros((N, nu))
        impl.riccati_backward(A, B, qx, qu, Qxx, Quu, Qux, 1e-6, 10.0, 1e10, K, kff)
    return f"riccati_backward N={N}", run


def case_ray_boxes(rng, nb=30, nr=4 * 64 * 48):
    centers = rng.uniform(-4, 4, (nb, 3))
    halves = rng.uniform(0.1, 0.8, (nb, 3))
    rots = np.array([matrix_from_rotvec(r) for r in rng.normal(size=(nb, 3))])
    dirs = rng.normal(size=(nr, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.zeros(3)

    def run(impl):
        t, idx = np.empty(nr), np.empty(nr, dtype=np.int_)
        impl.ray_boxes(origin, dirs, centers, halves, rots, t, idx)
    return f"ray_boxes {nb} boxes {nr} rays", run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for make in (case_edt, case_raycast, case_rollout, case_riccati, case_ray_boxes):
        name, run = make(rng)
        tp = best_of(lambda: run(_fallback), args.repeat)
        tc = best_of(lambda: run(_kernels), args.repeat)
        print(f"{name:34s} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
