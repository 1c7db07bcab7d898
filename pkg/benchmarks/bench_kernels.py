"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import sys
import timeit

import numpy as np

from sphemu import kernels


def cases():
    x64, _ = kernels.python_backend.gauss_legendre(64)
    p64 = kernels.python_backend.legendre_table(x64, 42)
    rng = np.random.default_rng(0)
    members = rng.standard_normal((8, 10, 32, 64))
    truth = rng.standard_normal((10, 32, 64))
    return {
        "gauss_legendre(96)": lambda b: b.gauss_legendre(96),
        "legendre_table(64, 42)": lambda b: b.legendre_table(x64, 42),
        "legendre_dtheta(64, 42)": lambda b: b.legendre_dtheta(x64, p64),
        "crps_fair(E=8, 10x32x64)": lambda b: b.crps_fair(members, truth),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    backends = [kernels.python_backend]
    if kernels.compiled_backend is None:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    else:
        backends.append(kernels.compiled_backend)
    rows = []
    print(f"{'kernel':28s} " + " ".join(f"{b.name + ' ms':>12s}" for b in backends) + "   speedup")
    for name, fn in cases().items():
        times = []
        for b in backends:
            number = 3
            t = min(timeit.repeat(lambda: fn(b), number=number, repeat=args.repeat)) / number
            times.append(t * 1e3)
        speed = times[0] / times[1] if len(times) > 1 else float("nan")
        rows.append({"kernel": name, **{b.name + "_ms": t for b, t in zip(backends, times)}, "speedup": speed})
        print(f"{name:28s} " + " ".join(f"{t:12.3f}" for t in times) + f"   {speed:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
