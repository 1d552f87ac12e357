"""Time the compiled path integrator against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--paths N] [--steps N] [--repeat N]

Both backends run on the same packed noise and must return identical
arrays; the script aborts if they differ.
"""
import argparse
import time

import numpy as np

from levydpp import _kernels
from levydpp.control import constant
from levydpp.dynamics import integrate_batch
from levydpp.problems import get_problem
from levydpp.value import sample_batch


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--problem", default="heavy-tail")
    args = ap.parse_args(argv)

    p = get_problem(args.problem, n_steps=args.steps)
    nb = sample_batch(p.spec, p.coeffs.m, p.s, p.T, p.n_steps, 0, args.paths)
    pol = constant(1.0)
    n_points = nb.grid_t.size
    print(f"problem={p.name} paths={args.paths} grid points={n_points} compiled backend={_kernels.BACKEND}")

    results = {}
    for label, kern in [("python", _kernels.python_jump_euler_affine), ("compiled", _kernels.jump_euler_affine)]:
        if label == "compiled" and _kernels.BACKEND != "cython":
            print("compiled extension not available; skipping")
            continue
        t, out = best_of(lambda: integrate_batch(p.coeffs, pol, nb, p.x0, M=8.0, spec=p.spec, kernel=kern),
                         args.repeat)
        results[label] = (t, out)
        print(f"{label:>9}: {t * 1e3:9.2f} ms  ({n_points / t / 1e6:8.2f} M points/s)")

    if len(results) == 2:
        a, b = results["python"][1], results["compiled"][1]
        same = all(np.array_equal(x, y, equal_nan=True) for x, y in
                   [(a.values, b.values), (a.left, b.left), (a.controls, b.controls), (a.applied, b.applied)])
        if not same:
            raise SystemExit("backends disagree")
        print(f"identical outputs; speedup x{results['python'][0] / results['compiled'][0]:.1f}")


if __name__ == "__main__":
    main()
