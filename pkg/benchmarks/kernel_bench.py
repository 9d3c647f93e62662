"""Time each hot kernel under the numpy and numba backends.

Shapes mirror the shipped model (d_model 64, 4 heads, seq ~16, vocab 102).
Run from the repo root:

    python benchmarks/kernel_bench.py --repeats 2000
"""

import argparse
import os
import time

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np

from latefuse import kernels


def bench(fn, args, repeats):
    fn(*args)  # warm (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def build_cases(rng):
    T, S, d, h, vocab = 16, 24, 64, 4, 102
    q = rng.standard_normal((T, d))
    kv = rng.standard_normal((S, d))
    mask = np.ones((T, S), dtype=np.uint8)
    out, w = kernels.attention_forward(q, kv, kv, mask, h)
    x = rng.standard_normal((T, d))
    g = np.ones(d)
    b = np.zeros(d)
    y, mu, rstd = kernels.layernorm_forward(x, g, b, 1e-5)
    flat = rng.standard_normal(T * 4 * d)
    logits = rng.standard_normal((T, vocab))
    targets = rng.integers(0, vocab, T).astype(np.int64)
    losses, probs = kernels.cross_entropy_rows(logits, targets)
    p = rng.standard_normal(d * d)
    return [
        ("attention_forward", "attention_forward", (q, kv, kv, mask, h)),
        ("attention_backward", "attention_backward", (np.ones_like(out), q, kv, kv, w, h)),
        ("layernorm_forward", "layernorm_forward", (x, g, b, 1e-5)),
        ("layernorm_backward", "layernorm_backward", (np.ones_like(y), x, g, mu, rstd)),
        ("gelu_forward", "gelu_forward", (flat,)),
        ("gelu_backward", "gelu_backward", (flat, np.ones_like(flat))),
        ("softmax_rows", "softmax_rows", (logits,)),
        ("cross_entropy_rows", "cross_entropy_rows", (logits, targets)),
        ("cross_entropy_rows_backward", "cross_entropy_rows_backward", (probs, targets, np.ones_like(losses))),
        ("adamw_update", "adamw_update", (p.copy(), p, np.zeros_like(p), np.zeros_like(p), 1, 1e-3, 0.9, 0.999, 1e-8, 0.01)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=2000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(rng)

    times = {}
    backends = ["numpy"] + (["numba"] if kernels.NUMBA_AVAILABLE else [])
    for backend in backends:
        kernels.set_backend(backend)
        for label, name, call_args in cases:
            times[(backend, label)] = bench(getattr(kernels, name), call_args, args.repeats)

    if not kernels.NUMBA_AVAILABLE:
        print("numba not importable; numpy column only")
    print(f"{'kernel':<28} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for label, _, _ in cases:
        t_np = times[("numpy", label)] * 1e6
        if ("numba", label) in times:
            t_nb = times[("numba", label)] * 1e6
            print(f"{label:<28} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>8.2f}x")
        else:
            print(f"{label:<28} {t_np:>10.2f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
