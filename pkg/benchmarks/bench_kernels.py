"""Time the compiled kernels against the numpy fallback on pipeline-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from ostvam._kernels import _pykernels

try:
    from ostvam._kernels import _ckernels
except ImportError:
    _ckernels = None


def _cases(rng):
    n, h = 128, 0.155
    img = rng.random((n, n))
    ang = np.deg2rad(np.arange(360) * 1.0)
    sino = rng.random((360, 160))
    nr, nz = 1155, 96
    t = rng.uniform(-0.9, 0.9, nr)
    p0 = np.column_stack([t * 12.4, -np.sqrt(12.4**2 - (t * 12.4) ** 2)])
    d = np.column_stack([np.zeros(nr), np.ones(nr)])
    length = -2 * p0[:, 1]
    edge = -n / 2 * h
    field = rng.random((n, n, nz))
    weights = rng.random((nr, nz))
    return {
        "radon 128^2 x 360 angles": lambda k: k.radon(img, h, ang, 160, h, 79.5),
        "backproject 360 x 160 -> 128^2": lambda k: k.backproject(sino, ang, h, 79.5, n, n, h, 0.0, 12.4),
        "attenuated backproject": lambda k: k.backproject(sino, ang, h, 79.5, n, n, h, 1 / 12.4, 12.4),
        "deposit 1155 rays x 96 rows": lambda k: k.deposit_rays(np.zeros((n, n, nz)), p0, d, length,
                                                                 np.zeros(nr), weights, 1 / 12.4, edge, edge, h),
        "integrate 1155 rays x 96 rows": lambda k: k.integrate_rays(field, p0, d, length, edge, edge, h),
    }


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python (s)':>11s} {'cython (s)':>11s} {'speedup':>8s}")
    for name, call in _cases(rng).items():
        py = _best(lambda: call(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:34s} {py:11.4f} {'n/a':>11s} {'n/a':>8s}")
            continue
        cy = _best(lambda: call(_ckernels), args.repeat)
        print(f"{name:34s} {py:11.4f} {cy:11.4f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
