"""Compare the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the per-call time of each backend, the
speedup and the max abs difference between their outputs.
"""

import argparse
import timeit

import numpy as np

from pflow import _kernels_py as py
from pflow.losses import MLPSpec, init_mlp_params, make_mlp_dataset

try:
    from pflow import _kernels as cy
except ImportError:
    cy = None


def cases(widths, n):
    spec = MLPSpec(widths, 0, n)
    p = init_mlp_params(spec)
    ds = make_mlp_dataset(0, n)
    w = np.asarray(widths, dtype=np.intp)
    v = np.random.default_rng(1).standard_normal(p.size)
    D = p.size
    A = -np.eye(D) * 0.5
    c = np.zeros(D)
    tag = f"{'-'.join(map(str, widths))} D={D}"
    out = [
        (f"mlp_loss_grad  {tag}", lambda k: k.mlp_loss_grad(p, ds.x, ds.y, w)[1]),
        (f"mlp_hvp        {tag}", lambda k: k.mlp_hvp(p, ds.x, ds.y, w, v)),
        (f"euler_mlp 1e3  {tag}", lambda k: k.euler_mlp_gradflow(p, ds.x, ds.y, w, -1.0, 5e-5, 1000, 1000)[0]),
    ]
    if D <= 100:
        out += [
            (f"mlp_hessian    {tag}", lambda k: k.mlp_hessian(p, ds.x, ds.y, w)),
            (f"euler_linear 1e4 D={D}", lambda k: k.euler_linear(A, c, p, 5e-5, 10000, 10000)[0]),
        ]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':36s} {'python':>11s} {'cython':>11s} {'speedup':>8s} {'max diff':>9s}")
    for widths, n in [((2, 10, 1), 5), ((2, 32, 32, 1), 40)]:
        for name, fn in cases(widths, n):
            number = max(1, min(1000, int(0.2 / max(timeit.timeit(lambda: fn(py), number=1), 1e-6))))
            t_py = min(timeit.repeat(lambda: fn(py), number=number, repeat=args.repeat)) / number
            if cy is None:
                print(f"{name:36s} {t_py * 1e6:9.1f}us")
                continue
            t_cy = min(timeit.repeat(lambda: fn(cy), number=number, repeat=args.repeat)) / number
            diff = float(np.max(np.abs(np.asarray(fn(py)) - np.asarray(fn(cy)))))
            print(f"{name:36s} {t_py * 1e6:9.1f}us {t_cy * 1e6:9.1f}us {t_py / t_cy:7.1f}x {diff:9.1e}", flush=True)


if __name__ == "__main__":
    main()
