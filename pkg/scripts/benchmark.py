"""Time one reconstruction per method at a given sensor size."""
import argparse
import time

import numpy as np

from lenslpd import calibration as cal
from lenslpd import lpd, solvers
from lenslpd.core import ImageField, SensorGeometry


def timed(fn):
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--height", type=int, default=270)
    ap.add_argument("--width", type=int, default=480)
    ap.add_argument("--iters", type=int, default=100, help="classical solver iterations")
    a = ap.parse_args()
    g = SensorGeometry(a.height, a.width, 3)
    psf = cal.synth_psf(g, 0)
    b = ImageField(np.random.default_rng(0).random(g.shape).astype(np.float32))
    cfg = solvers.SolverConfig(max_iters=a.iters, tolerance=1e-12)
    print(f"fista x{a.iters}: {timed(lambda: solvers.fista_solve(b, psf, cfg)):.2f} s")
    print(f"admm x{a.iters}: {timed(lambda: solvers.admm_solve(b, psf, cfg)):.2f} s")
    for variant, n, unet in (("per_channel", 1, False), ("per_channel", 5, False), ("mixed", 5, True)):
        model = lpd.lpd_init(psf, lpd.LpdConfig(n, variant, 10, unet, g), 0)
        label = f"lpd {variant} n={n}{' +unet' if unet else ''} ({model.parameter_count():,} params)"
        print(f"{label}: {timed(lambda: lpd.reconstruct(model, b)):.2f} s")


if __name__ == "__main__":
    main()
