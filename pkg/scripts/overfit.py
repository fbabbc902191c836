"""Train the 5-kernel per-channel model on 8 synthetic 64x64 pairs and print training PSNR."""
import argparse
import time

import numpy as np

from lenslpd import calibration as cal
from lenslpd import lpd, training
from lenslpd.core import SensorGeometry


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kernels", type=int, default=5)
    ap.add_argument("--batch-size", type=int, default=1)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--every", type=int, default=100)
    ap.add_argument("--target", type=float, default=30.0)
    a = ap.parse_args()
    g = SensorGeometry(64, 64, 3)
    psf = cal.synth_psf(g, 0)
    data = cal.synthetic_dataset(g, psf, 8, seed=0)
    model = lpd.lpd_init(psf, lpd.LpdConfig(a.kernels, "per_channel", 10, False, g), seed=0)
    print(f"step 0 psnr {np.mean(training.evaluate_psnr(model, data)):.2f}", flush=True)
    start = time.perf_counter()

    def report(step, log):
        if step % a.every:
            return False
        score = float(np.mean(training.evaluate_psnr(model, data)))
        print(f"step {step} loss {log.losses[-1]:.5f} psnr {score:.2f} elapsed {time.perf_counter() - start:.0f}s",
              flush=True)
        return score >= a.target

    training.fit(model, data, training.TrainConfig(epochs=10 ** 6, batch_size=a.batch_size, learning_rate=a.lr,
                                                   max_steps=a.steps), validation=[], callback=report)


if __name__ == "__main__":
    main()
