"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend and the
speed-up. Outputs are checked for agreement before timing.
"""
import argparse
import statistics
import time

import numpy as np

from omnitraj.numerics import _kernels_py as py

try:
    from omnitraj.numerics import _kernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    x = rng.normal(size=(4096, 64))
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    logits = rng.normal(size=(2048, 48))
    valid = (rng.random((2048, 48)) > 0.2).astype(np.uint8)
    flat = rng.normal(size=256 * 1024)
    g = rng.normal(size=x.shape)
    _, xhat, rstd = py.layer_norm_fwd(x, gain, bias, 1e-5)
    y = py.softmax_fwd(logits, valid)
    pos, vel = rng.uniform(-5, 5, size=(10, 2)), rng.normal(size=(10, 2))
    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(x, gain, bias, 1e-5),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(g, xhat, rstd, gain),
        "softmax_fwd": lambda k: k.softmax_fwd(logits, valid),
        "softmax_bwd": lambda k: k.softmax_bwd(logits, y),
        "gelu_fwd": lambda k: k.gelu_fwd(flat),
        "gelu_bwd": lambda k: k.gelu_bwd(flat, flat),
        "social_integrate": lambda k: k.social_integrate(pos, vel, 750, 0.04, 1.0, 2.0),
    }


def _flatten(out):
    return out if isinstance(out, tuple) else (out,)


def timed(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'python ms':>10} {'cython ms':>10} {'speed-up':>9}")
    for name, call in cases(rng).items():
        for a, b in zip(_flatten(call(py)), _flatten(call(cy))):
            np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-9, atol=1e-12)
        tp = timed(lambda: call(py), args.repeat)
        tc = timed(lambda: call(cy), args.repeat)
        print(f"{name:<18} {tp * 1e3:>10.3f} {tc * 1e3:>10.3f} {tp / tc:>8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
