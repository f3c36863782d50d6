"""Time the CTC forward-backward and edit-distance kernels, numba vs numpy.

    python3 benchmarks/bench_ctc.py            # both backends, one subprocess each
    python3 benchmarks/bench_ctc.py --backend numpy --repeat 3

The numpy run sets LATTICE_LID_NO_NUMBA=1 before importing the package, the
same switch users flip, so the comparison exercises the real dispatch.
"""

import argparse
import json
import os
import subprocess
import sys
import time

CASES = [
    # (batch, frames, vocab, target length)
    (16, 60, 44, 12),
    (16, 120, 44, 25),
    (32, 200, 44, 40),
    (16, 60, 3, 12),
]


def run_cases(repeat):
    import numpy as np

    from lattice_lid import _accel
    from lattice_lid._kernels import ctc_batch, levenshtein_table

    rng = np.random.default_rng(0)
    results = []
    for B, T, V, S in CASES:
        x = rng.normal(size=(B, T, V))
        scores = x - np.log(np.exp(x).sum(-1, keepdims=True))
        targets = [list(rng.integers(1, V, size=S)) for _ in range(B)]
        lengths = np.full(B, T)
        ctc_batch(scores, lengths, targets)  # compile / warm up
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            ctc_batch(scores, lengths, targets)
            best = min(best, time.perf_counter() - t0)
        results.append({"kernel": "ctc", "shape": f"B={B} T={T} V={V} S={S}", "seconds": best})

    hyp = list(rng.integers(0, 40, size=60))
    ref = list(rng.integers(0, 40, size=60))
    levenshtein_table(hyp, ref)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(200):
            levenshtein_table(hyp, ref)
        best = min(best, time.perf_counter() - t0)
    results.append({"kernel": "levenshtein x200", "shape": "60 x 60", "seconds": best})
    return {"backend": "numba" if _accel.use_numba() else "numpy", "results": results}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--backend", choices=["both", "numba", "numpy"], default="both")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    if args.backend != "both":
        if args.backend == "numpy":
            os.environ["LATTICE_LID_NO_NUMBA"] = "1"
        print(json.dumps(run_cases(args.repeat)))
        return

    runs = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ)
        env.pop("LATTICE_LID_NO_NUMBA", None)
        if backend == "numpy":
            env["LATTICE_LID_NO_NUMBA"] = "1"
        out = subprocess.run([sys.executable, __file__, "--backend", backend, "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        runs[backend] = json.loads(out.stdout.strip().splitlines()[-1])
    print(f"{'kernel':<18}{'shape':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for a, b in zip(runs["numba"]["results"], runs["numpy"]["results"]):
        print(f"{a['kernel']:<18}{a['shape']:<24}{1e3 * a['seconds']:>10.2f}{1e3 * b['seconds']:>10.2f}"
              f"{b['seconds'] / a['seconds']:>8.1f}x")


if __name__ == "__main__":
    main()
