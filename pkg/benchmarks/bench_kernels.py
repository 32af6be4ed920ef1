"""Compare the numba kernels against the pure-numpy fallback.

Runs each hot kernel on identical inputs, checks the results agree, and
reports wall-clock timings. The same selection happens at import time in
vidkit.kernels via the VIDKIT_NUMBA env var ("0" disables numba).

Usage: python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from vidkit.kernels import numpy_impl

try:
    from vidkit.kernels import numba_impl
except ImportError:
    numba_impl = None


def timeit(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return out, best


def bench(name, np_fn, nb_fn, args, repeats):
    ref, t_np = timeit(np_fn, args, repeats)
    if nb_fn is None:
        print(f"{name:24s} numpy {t_np * 1e3:8.2f} ms   (numba unavailable)")
        return
    nb_fn(*args)  # trigger jit outside the timed region
    out, t_nb = timeit(nb_fn, args, repeats)
    ref_arrs = ref if isinstance(ref, tuple) else (ref,)
    out_arrs = out if isinstance(out, tuple) else (out,)
    for a, b in zip(ref_arrs, out_arrs):
        assert np.allclose(a, b, atol=1e-10), f"{name}: backend mismatch"
    print(f"{name:24s} numpy {t_np * 1e3:8.2f} ms   numba {t_nb * 1e3:8.2f} ms   "
          f"speedup {t_np / t_nb:5.1f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    x = rng.normal(size=(32, 8, 16, 16))
    w = rng.normal(size=(16, 8, 3, 3))
    b = rng.normal(size=16)
    gy = rng.normal(size=(32, 16, 16, 16))

    xt = rng.normal(size=(32, 16, 4, 4))
    wt = rng.normal(size=(16, 8, 4, 4))
    bt = rng.normal(size=8)
    gyt = rng.normal(size=(32, 8, 8, 8))

    xp = rng.normal(size=(32, 8, 16, 16))
    yp, idx = numpy_impl.maxpool2d_forward(xp, 2, 2)
    gp = rng.normal(size=yp.shape)

    nb = numba_impl
    pairs = [
        ("conv2d_forward", numpy_impl.conv2d_forward,
         nb and nb.conv2d_forward, (x, w, b, 1, 1)),
        ("conv2d_backward", numpy_impl.conv2d_backward,
         nb and nb.conv2d_backward, (x, w, gy, 1, 1)),
        ("convt2d_forward", numpy_impl.convt2d_forward,
         nb and nb.convt2d_forward, (xt, wt, bt, 2, 1)),
        ("convt2d_backward", numpy_impl.convt2d_backward,
         nb and nb.convt2d_backward, (xt, wt, gyt, 2, 1)),
        ("maxpool2d_forward", numpy_impl.maxpool2d_forward,
         nb and nb.maxpool2d_forward, (xp, 2, 2)),
        ("maxpool2d_backward", numpy_impl.maxpool2d_backward,
         nb and nb.maxpool2d_backward, (gp, idx, xp.shape)),
    ]
    for name, np_fn, nb_fn, fn_args in pairs:
        bench(name, np_fn, nb_fn, fn_args, args.repeats)


if __name__ == "__main__":
    main()
