"""Compare 1-kernel and 5-kernel per-channel models on the two-zone benchmark.

Prints test PSNR per seed and the median gain of 5 kernels over 1.
"""
import argparse
import time

import numpy as np

from lenslpd import calibration as cal
from lenslpd import lpd, training
from lenslpd.core import SensorGeometry


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=20)
    ap.add_argument("--kernels", type=int, nargs="+", default=[1, 5])
    a = ap.parse_args()
    g = SensorGeometry(64, 64, 3)
    tz = cal.synth_psf(g, 0, "two_zone")
    total = a.train + a.test
    data = cal.synthetic_dataset(g, tz, total, noise_sigma=0.01, split_ratio=a.train / total, seed=0)
    train = [r for r in data if r.split == "train"]
    test = [r for r in data if r.split == "test"]
    gains = []
    for seed in range(a.seeds):
        scores = {}
        for n in a.kernels:
            start = time.perf_counter()
            model = lpd.lpd_init(tz.measured, lpd.LpdConfig(n, "per_channel", 10, False, g), seed)
            training.fit(model, train, training.TrainConfig(epochs=a.epochs, batch_size=4, seed=seed), validation=[])
            scores[n] = float(np.mean(training.evaluate_psnr(model, test)))
            print(f"seed {seed} kernels {n} test psnr {scores[n]:.2f} ({time.perf_counter() - start:.0f}s)", flush=True)
        gains.append(scores[max(a.kernels)] - scores[min(a.kernels)])
    print(f"median gain {np.median(gains):+.2f} dB over {a.seeds} seeds")


if __name__ == "__main__":
    main()
