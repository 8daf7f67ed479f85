"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--params 82000] [--repeats 5]

Both backends are imported side by side, so the environment flag is not
needed here. Each row reports the best of ``--repeats`` timings after one
warm-up call (which also triggers numba compilation).
"""

import argparse
import time

import numpy as np

from espretrain.kernels import block_for, implementation


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(impl, n, chunk, rows, vocab):
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(n).astype(np.float32) * 0.02
    block = block_for(chunk)
    keys = rng.integers(1, 2**63, 30, dtype=np.uint64)
    coefs = rng.standard_normal(30)
    acc = np.zeros(chunk, np.float32)
    noise = np.empty(n, np.float32)
    logits = rng.standard_normal((rows, vocab)).astype(np.float32)
    labels = rng.integers(0, vocab, rows)
    hidden = rng.standard_normal((rows, 64)).astype(np.float32)
    gain = np.ones(64, np.float32)
    scores = rng.standard_normal((rows * 4, 16)).astype(np.float32)

    def round_trip():
        offsets, values = impl.perturb(theta, int(keys[0]), 0, 1e-3, block)
        impl.unperturb(theta, int(keys[0]), 0, 1e-3, offsets, values, block)

    def softmax():
        s = scores.copy()
        impl.shift_rows(s)
        np.exp(s, out=s)
        impl.normalize_rows(s)

    return {
        f"gaussian fill ({n:,} floats)": lambda: impl.gaussian_fill(noise, np.uint64(keys[0]), 0),
        f"perturb + restore ({n:,} params)": round_trip,
        f"update chunk (30 members x {chunk:,})": lambda: impl.update_chunk(acc, keys, coefs, 0, 30, 1e-3, block),
        f"label log-probs ({rows:,} x {vocab})": lambda: impl.label_logprobs(logits, labels),
        f"rms norm ({rows:,} x 64)": lambda: impl.rms_norm_rows(hidden, gain, 1e-6),
        f"softmax rows ({rows * 4:,} x 16)": softmax,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--params", type=int, default=82_000)
    parser.add_argument("--chunk", type=int, default=1 << 16)
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--vocab", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    timings = {}
    for backend in ("numba", "numpy"):
        impl = implementation(backend)
        for name, fn in cases(impl, args.params, args.chunk, args.rows, args.vocab).items():
            timings.setdefault(name, {})[backend] = best_of(fn, args.repeats)

    print(f"{'kernel':<42}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, t in timings.items():
        print(f"{name:<42}{t['numba'] * 1e3:>10.2f}{t['numpy'] * 1e3:>10.2f}{t['numpy'] / t['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
