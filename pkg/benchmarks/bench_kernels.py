"""Benchmark the compiled matmul kernel against the pure-numpy backend.

Shapes mirror the hot paths of the training pipeline: projection forward
and backward products, contrastive logits, and the retrieval similarity
matrix. Both backends accumulate in the same fixed order, so outputs are
also checked for bitwise equality.

Usage: python benchmarks/bench_kernels.py [--reps N]
"""

import argparse
import time

import numpy as np

from xbt import kernels
from xbt.data import SyntheticSpec, synth_generate
from xbt.losses import NoiseSpec, pretrain_loss
from xbt.training import TrainConfig, _TAG_PHI_INIT, _derive_seed
from xbt.layers import phi_init

SHAPES = [
    ("projection lin1", (1024, 96, 256)),
    ("projection lin2", (1024, 256, 256)),
    ("projection lin3", (1024, 256, 64)),
    ("weight gradient", (256, 1024, 256)),
    ("contrastive logits", (1024, 64, 1024)),
    ("retrieval similarity", (5000, 64, 1000)),
]


def time_matmul(a, b, backend, reps):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        kernels.matmul(a, b, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_shapes(reps):
    rng = np.random.default_rng(0)
    print(f"{'shape':<24} {'dims':<18} {'c (ms)':>9} {'py (ms)':>9} {'speedup':>8}  bitwise")
    for name, (n, k, m) in SHAPES:
        a = rng.standard_normal((n, k)).astype(np.float32)
        b = rng.standard_normal((k, m)).astype(np.float32)
        out_c = kernels.matmul(a, b, backend="c")
        out_py = kernels.matmul(a, b, backend="py")
        equal = np.array_equal(out_c, out_py)
        tc = time_matmul(a, b, "c", reps)
        tp = time_matmul(a, b, "py", reps)
        print(f"{name:<24} {f'{n}x{k}x{m}':<18} {tc * 1e3:>9.2f} {tp * 1e3:>9.2f} "
              f"{tp / tc:>7.1f}x  {'yes' if equal else 'NO'}")


def bench_training_step():
    spec = SyntheticSpec(n_pretrain_texts=1024, seed=0)
    res = synth_generate(spec)
    cfg = TrainConfig()
    phi = phi_init(spec.d_new, spec.d_old, seed=_derive_seed(cfg.seed, _TAG_PHI_INIT))
    noise = NoiseSpec(cfg.sigma, 0)
    print("\nfull pretraining step (batch 1024, forward + backward):")
    for backend in ("c", "py"):
        with kernels.use_backend(backend):
            t0 = time.perf_counter()
            loss, _ = pretrain_loss(phi, res.pretrain_new, res.pretrain_old,
                                    noise, cfg.log_scale_pre)
            dt = time.perf_counter() - t0
        print(f"  {backend:<3} backend: {dt * 1e3:8.1f} ms (loss {loss:.4f})")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=3)
    args = parser.parse_args()
    if kernels.active_backend() != "c":
        parser.error("compiled kernel not built; run `python setup.py build_ext --inplace`")
    bench_shapes(args.reps)
    bench_training_step()


if __name__ == "__main__":
    main()
