"""Times the compiled kernel core against the pure-python fallback.

Run as a script: `python benchmarks/bench_kernels.py`. Prints one line per
(kernel, backend) with the best-of-5 wall time, and the speedup."""

from __future__ import annotations

import time

import numpy as np

from protopose._kernels import _fallback

try:
    from protopose._kernels import _core
except ImportError:
    _core = None


def _time(fn, repeat=5, inner=20):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def bench():
    rng = np.random.default_rng(0)
    H, W, J = 64, 48, 17
    xs = rng.uniform(0, W - 1, J)
    ys = rng.uniform(0, H - 1, J)
    vis = np.ones(J, dtype=np.uint8)
    hm = _fallback.encode_gaussians(xs, ys, vis, H, W, 2.0)
    logits = rng.normal(size=(3, 400))

    cases = {
        "encode": lambda mod: mod.encode_gaussians(xs, ys, vis, H, W, 2.0),
        "decode": lambda mod: mod.decode_peaks(hm),
        "sinkhorn": lambda mod: mod.sinkhorn(logits, 0.05, 3, 0.0),
    }
    backends = {"python": _fallback}
    if _core is not None:
        backends["compiled"] = _core

    print(f"{'kernel':10s} {'backend':10s} {'per call':>12s}")
    for name, call in cases.items():
        times = {}
        for bname, mod in backends.items():
            times[bname] = _time(lambda: call(mod))
            print(f"{name:10s} {bname:10s} {times[bname] * 1e6:10.1f} us")
        if "compiled" in times:
            print(f"{name:10s} {'speedup':10s} {times['python'] / times['compiled']:10.2f} x")
    if _core is None:
        print("compiled core not built; only the fallback was timed")


if __name__ == "__main__":
    bench()
