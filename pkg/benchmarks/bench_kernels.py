"""Compare the compiled and pure-python hot kernels.

    python benchmarks/bench_kernels.py [--runs N]

Prints median wall time per call for the augmentation warp (one training
batch) and the single-sample inference engine, for each available backend.
"""

import argparse
import time

import numpy as np

from latent_gaze import kernels
from latent_gaze.decoder import DecoderConfig, deployment_engine, init_params
from latent_gaze.optics import NormalizationStats
from latent_gaze.synth_eye import draw_augmentation


def median_us(fn, runs, warmup=3):
    for _ in range(warmup):
        fn()
    t = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter_ns()
        fn()
        t[i] = time.perf_counter_ns() - t0
    return float(np.median(t)) / 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    src = (rng.random((args.batch, 300, 300)) * 255).astype(np.uint8)
    params = draw_augmentation(rng, args.batch)
    stats = NormalizationStats.identity()
    y = rng.standard_normal(16).astype(np.float32)
    g = np.empty(3, np.float32)

    rows = []
    for backend in kernels.available_backends():
        warp = median_us(lambda: kernels.warp_batch(src, params, 1 / 255, backend=backend),
                         max(5, args.runs // 20))
        rows.append(("warp_batch", backend, warp))
        for act in ("relu", "gelu"):
            eng = deployment_engine(init_params(0, DecoderConfig(activation=act)), stats, backend)
            rows.append((f"infer[{act}]", backend, median_us(lambda: eng.infer(y, g), args.runs * 10)))

    base = {k: us for k, b, us in rows if b == "python"}
    print(f"{'kernel':<14}{'backend':<10}{'median us':>12}{'speedup':>10}")
    for k, b, us in rows:
        print(f"{k:<14}{b:<10}{us:>12.1f}{base[k] / us:>9.1f}x")


if __name__ == "__main__":
    main()
