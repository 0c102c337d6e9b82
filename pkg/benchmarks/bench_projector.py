"""Time the compiled projector kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_projector.py [--sizes 64 128 256] [--repeat 3]

Prints one row per (beam, size, operator) with the best wall time of each
backend, the speedup and the maximum absolute difference between their
outputs.
"""

import argparse
import time

import numpy as np

from ctml import _backend
from ctml.geometry import fan_geometry, parallel_geometry
from ctml.projector import backproject_array, fbp_array, project_array


def best_time(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def geometries(n):
    views = max(90, 2 * n)
    yield "parallel", parallel_geometry(n, views)
    yield "fan", fan_geometry(n, views, int(1.5 * n))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = _backend.available()
    if "cython" not in backends:
        print("compiled core not built; timing the python fallback only")
    rng = np.random.default_rng(0)
    header = f"{'beam':<9}{'size':>5}  {'op':<12}" + "".join(f"{b + ' [s]':>14}" for b in backends)
    print(header + ("    speedup   max|diff|" if len(backends) == 2 else ""))
    for n in args.sizes:
        for beam, g in geometries(n):
            x = rng.standard_normal(g.image_shape)
            p = rng.standard_normal(g.sinogram_shape)
            ops = {
                "forward": lambda b: project_array(x, g, backend=b),
                "adjoint": lambda b: backproject_array(p, g, backend=b),
                "fbp": lambda b: fbp_array(p, g, backend=b),
            }
            for name, op in ops.items():
                res = {b: best_time(lambda: op(b), args.repeat) for b in backends}
                row = f"{beam:<9}{n:>5}  {name:<12}" + "".join(f"{res[b][0]:>14.4f}" for b in backends)
                if len(backends) == 2:
                    speed = res["python"][0] / res["cython"][0]
                    diff = float(np.max(np.abs(res["python"][1] - res["cython"][1])))
                    row += f"{speed:>10.1f}x  {diff:.1e}"
                print(row)


if __name__ == "__main__":
    main()
