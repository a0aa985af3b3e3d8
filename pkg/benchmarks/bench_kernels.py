"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 20]
"""
import argparse
import timeit

import numpy as np

from morphnas import _kernels_py, kernels

CASES = [
    ("im2col 64x16x16x16 k3", "im2col", lambda x: (x, 3, 3, 1), (64, 16, 18, 18)),
    ("im2col 64x32x8x8 k5", "im2col", lambda x: (x, 5, 5, 1), (64, 32, 12, 12)),
    ("maxpool fwd 64x32x16x16", "maxpool_forward", lambda x: (x, 2), (64, 32, 16, 16)),
]


def bench(fn, args, repeats):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    if "cython" not in kernels.available_backends():
        print("compiled extension not built; only the numpy backend is available")
        return 1
    ext = kernels.get_backend("cython")
    rng = np.random.default_rng(0)
    rows = []
    for label, name, mk, shape in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        call = mk(x)
        rows.append((label, bench(getattr(_kernels_py, name), call, args.repeats),
                     bench(getattr(ext, name), call, args.repeats)))
    # backward kernels take the forward outputs
    x = rng.standard_normal((64, 16, 18, 18)).astype(np.float32)
    cols = _kernels_py.im2col(x, 3, 3, 1)
    call = (cols, x.shape, 3, 3, 1)
    rows.append(("col2im 64x16x16x16 k3", bench(_kernels_py.col2im, call, args.repeats),
                 bench(ext.col2im, call, args.repeats)))
    x = rng.standard_normal((64, 32, 16, 16)).astype(np.float32)
    out, arg = _kernels_py.maxpool_forward(x, 2)
    call = (out, arg, x.shape, 2)
    rows.append(("maxpool bwd 64x32x16x16", bench(_kernels_py.maxpool_backward, call, args.repeats),
                 bench(ext.maxpool_backward, call, args.repeats)))

    print(f"{'kernel':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for label, tp, tc in rows:
        print(f"{label:<26}{tp * 1e3:>10.2f}{tc * 1e3:>11.2f}{tp / tc:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
