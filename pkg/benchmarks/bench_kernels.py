"""
Time the numpy and compiled patch kernels on the same inputs.

    python benchmarks/bench_kernels.py [--n 64] [--repeat 20]

Also times one small two-level PSC solve per backend by toggling
SSC_PURE_PYTHON in a subprocess.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ssc import fem_core as fc
from ssc._kernels import get_backend

SOLVE = """
import time
import numpy as np
from ssc import decomposition as dd, fem_core as fc, problems as pb, solver as sv
from ssc._kernels import BACKEND
mesh = fc.build_square_mesh({n})
f = fc.make_compatible(fc.load_of(fc.interpolate(mesh, lambda X: np.cos(np.pi * X[:, 0]))))
prob = pb.slaplace_problem(mesh, 3.0, f)
fam = dd.add_coarse_space(dd.build_overlapping_dd(mesh, 4, 1), fc.coarsen(mesh, 4))
t = time.perf_counter()
rec = sv.run_psc(prob, fam, sv.SolverConfig(max_outer_iters=10, record_timing=False), fc.constant(mesh, 0.0))
print(BACKEND, time.perf_counter() - t)
"""


def bench_kernels(n, repeat):
    mesh = fc.build_square_mesh(n)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(mesh.n_vertices)
    subset = np.arange(mesh.n_elements, dtype=np.int64)
    gl = np.arange(mesh.n_vertices, dtype=np.int64)
    args = (x, mesh.elements, mesh.grad_basis, mesh.areas)
    rows = []
    for name in ("numpy", "cython"):
        try:
            k = get_backend(name)
        except ImportError:
            print(f"{name}: not built")
            continue
        calls = {
            "energy": lambda: k.patch_energy(*args, 3.0, subset),
            "flux": lambda: k.patch_flux(*args, 3.0, subset, gl, np.zeros(mesh.n_vertices)),
            "hessian": lambda: k.patch_hessian(*args, 3.0, 0.0, subset, gl,
                                               np.zeros((mesh.n_vertices, mesh.n_vertices))),
        }
        for op, fn in calls.items():
            t = min(timeit.repeat(fn, number=1, repeat=repeat))
            rows.append((name, op, t * 1e3))
    print(f"kernels on a {n}x{n} square mesh ({mesh.n_elements} elements)")
    print(f"{'backend':8s} {'kernel':8s} {'ms':>10s}")
    for name, op, ms in rows:
        print(f"{name:8s} {op:8s} {ms:10.3f}")


def bench_solve(n):
    print(f"two-level PSC, s=3, {n}x{n} mesh, 10 iterations")
    for pure in ("1", "0"):
        env = dict(os.environ, SSC_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", SOLVE.format(n=n)], env=env, capture_output=True, text=True)
        if out.returncode:
            print(out.stderr.strip().splitlines()[-1])
            continue
        name, secs = out.stdout.split()
        print(f"{name:8s} {float(secs) * 1e3:10.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--solve-n", type=int, default=16)
    args = ap.parse_args()
    bench_kernels(args.n, args.repeat)
    bench_solve(args.solve_n)


if __name__ == "__main__":
    main()
