"""Compare the numba kernels with their numpy fallbacks.

Kernel timings call both implementations in-process.  The end-to-end row
times one training step of a small ptr-lambda model in two subprocesses,
one with UREWRITE_DISABLE_NUMBA=1.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from urewrite import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from urewrite import numerics as nx
from urewrite.corpus import build_vocab
from urewrite.model import ModelConfig, RewriterModel, encode_batch
from urewrite.synthetic import SyntheticSpec, generate_synthetic
ss = generate_synthetic(SyntheticSpec(num_samples=64, seed=1))
vocab = build_vocab(ss)
cfg = ModelConfig(vocab_size=len(vocab), d_model=64, n_heads=4, n_layers=2, d_ff=128,
                  max_positions=128, max_turns=8, dropout_rate=0.0)
m = RewriterModel(cfg)
b = encode_batch(ss[:32], vocab, cfg)
def step():
    m.zero_grad()
    with nx.Tape() as tape:
        loss = m.nll_loss(b)
    nx.backward(loss, tape)
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t) / {n})
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is unavailable or disabled; nothing to compare")
    rng = np.random.default_rng(0)

    # embedding backward: 32x40 token rows into a 300x64 table
    idx = rng.integers(0, 300, size=32 * 40)
    src = rng.normal(size=(idx.size, 64))
    # copy distribution: batch 32, 12 steps, 40 source positions, 300 ids
    w = rng.random((32, 12, 40))
    ids = rng.integers(0, 300, size=(32, 40))
    # LCS of two 60-token sequences
    a = rng.integers(0, 30, size=60)
    b = rng.integers(0, 30, size=60)

    cases = [
        ("scatter_add_rows", lambda: K.scatter_add_rows_np(np.zeros((300, 64)), idx, src),
         lambda: K._scatter_add_rows_nb(np.zeros((300, 64)), idx, src)),
        ("copy_scatter", lambda: K.copy_scatter_np(w, ids, 300), lambda: K._copy_scatter_nb(w, ids, 300)),
        ("lcs_length", lambda: K.lcs_length_np(list(a), list(b)), lambda: K._lcs_length_nb(a, b)),
    ]
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, f_np, f_nb in cases:
        f_nb()  # compile
        r_np, r_nb = f_np(), f_nb()
        assert np.allclose(r_np, r_nb), name
        t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        print(f"{name:<20}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}")

    times = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, UREWRITE_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=args.steps)],
                             env=env, capture_output=True, text=True, check=True)
        times[label] = float(out.stdout.strip().splitlines()[-1])
    print(f"{'train step (B=32)':<20}{1e3 * times['numpy']:>12.1f}{1e3 * times['numba']:>12.1f}"
          f"{times['numpy'] / times['numba']:>10.2f}")


if __name__ == "__main__":
    main()
