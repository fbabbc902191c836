"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import lpd, metrics, optics, solvers, training
from .core import (ImageField, SensorGeometry, export_image_8bit, import_image_8bit, read_tensor,
                   write_tensor)
from .errors import DataError, LensError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("lenslpd")


class UsageError(Exception):
    pass


def _read_field(path, domain="sensor") -> ImageField:
    path = Path(path)
    if path.suffix.lower() == ".ltsr":
        return read_tensor(path, domain)
    img = import_image_8bit(path)
    return img if domain == "sensor" else img.replace(img.data, domain)


def _write_field(field: ImageField, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".ltsr":
        write_tensor(field, path)
    else:
        export_image_8bit(field, path)


def _read_psf(path) -> optics.Psf:
    return optics.normalize_psf(_read_field(path))


# subcommands ------------------------------------------------------------------------------------


def cmd_simulate(args):
    geometry = SensorGeometry.parse(args.geometry)
    if args.psf in ("caustic", "two_zone"):
        psf = cal.synth_psf(geometry, args.seed, args.psf)
    else:
        psf = _read_psf(args.psf)
    records = cal.build_dataset(args.images, psf, geometry, args.noise, args.split, args.seed)
    out = cal.write_dataset(records, args.out)
    measured = psf.measured if isinstance(psf, cal.TwoZonePsf) else psf
    write_tensor(measured.kernel, out / "psf.ltsr")
    n_train = sum(r.split == "train" for r in records)
    print(f"wrote {len(records)} records ({n_train} train, {len(records) - n_train} test) to {out}")


def cmd_extract_psf(args):
    psf = cal.extract_psf(_read_field(args.capture), _read_field(args.dark))
    _write_field(psf.kernel, args.out)
    print(f"PSF written to {args.out}")


def cmd_homography(args):
    src, dst = np.loadtxt(args.src_points, ndmin=2), np.loadtxt(args.dst_points, ndmin=2)
    h = cal.estimate_homography(src, dst, use_ransac=args.ransac)
    np.savetxt(args.out, h.matrix, fmt="%.12g")
    print(f"homography written to {args.out}")


def _measurements(path: Path) -> list[tuple[str, Path]]:
    if path.is_dir():
        files = sorted(path.glob("*_meas.ltsr")) or sorted(path.glob("*.ltsr"))
        return [(f.stem.removesuffix("_meas"), f) for f in files]
    return [(path.stem, path)]


def cmd_reconstruct(args):
    psf = _read_psf(args.psf)
    if args.method == "lpd":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for --method lpd")
        model = lpd.load_model(args.checkpoint)
        if model.config.geometry.shape != psf.geometry.shape:
            raise UsageError(f"checkpoint geometry {model.config.geometry.shape} does not match PSF {psf.geometry.shape}")
    items = _measurements(Path(args.measurement))
    if not items:
        raise UsageError(f"no measurements under {args.measurement}")
    out = Path(args.out)
    many = len(items) > 1 or Path(args.measurement).is_dir()
    elapsed = 0.0
    for ident, path in items:
        b = _read_field(path)
        t0 = time.perf_counter()
        if args.method == "lpd":
            img = lpd.reconstruct(model, b)
        else:
            cfg = solvers.SolverConfig(
                max_iters=args.iters or (500 if args.method == "fista" else 100),
                lam=args.lam, regularizer="l1" if args.method == "fista" else "tv")
            solve = solvers.fista_solve if args.method == "fista" else solvers.admm_solve
            x, _ = solve(b, psf, cfg)
            img = optics.crop(x)
        elapsed += time.perf_counter() - t0
        _write_field(img, out / f"{ident}_recon.ltsr" if many else out)
    print(f"{len(items)} reconstruction(s), {1000 * elapsed / len(items):.1f} ms per frame")


def cmd_train(args):
    root = Path(args.dataset)
    train_set = cal.load_dataset(root, "train")
    test_set = cal.load_dataset(root, "test")
    psf = _read_psf(args.psf)
    geometry = psf.geometry
    cfg = lpd.LpdConfig(args.kernels, args.variant, args.unroll, args.unet, geometry)
    model = lpd.lpd_init(psf, cfg, args.seed)
    out = Path(args.out)
    tcfg = training.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                                seed=args.seed, checkpoint_every=args.checkpoint_every,
                                checkpoint_dir=str(out / "checkpoints"))
    model, tlog = training.fit(model, train_set, tcfg, validation=test_set or None)
    model.save(out / "model")
    (out / "train_log.csv").write_text(tlog.to_csv())
    summary = f"{len(tlog.steps)} steps, final loss {tlog.losses[-1]:.6g}"
    if tlog.val_psnr:
        summary += f", best validation PSNR {max(tlog.val_psnr):.2f} dB"
    print(summary)


def cmd_evaluate(args):
    report = metrics.evaluate_run(args.recon, args.gt, method=args.method)
    metrics.write_report(report, args.report)
    print(report.to_text(), end="")


# parser ------------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lenslpd", description="Lensless camera reconstruction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a paired dataset from a folder of images")
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--geometry", default="64x64")
    s.add_argument("--psf", default="caustic", help="caustic, two_zone or a kernel file")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--split", type=float, default=0.9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="calibration utilities")
    csub = c.add_subparsers(dest="calibrate_command", required=True)
    e = csub.add_parser("extract-psf")
    e.add_argument("--capture", required=True)
    e.add_argument("--dark", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract_psf)
    h = csub.add_parser("homography")
    h.add_argument("--src-points", required=True)
    h.add_argument("--dst-points", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--ransac", action="store_true")
    h.set_defaults(func=cmd_homography)

    r = sub.add_parser("reconstruct", help="reconstruct one measurement or a folder of them")
    r.add_argument("--method", choices=("fista", "admm", "lpd"), required=True)
    r.add_argument("--measurement", required=True)
    r.add_argument("--psf", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    r.add_argument("--iters", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="train the unrolled network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--psf", required=True)
    t.add_argument("--variant", choices=lpd.VARIANTS, default="per_channel")
    t.add_argument("--kernels", type=int, default=5)
    t.add_argument("--unroll", type=int, default=10)
    t.add_argument("--unet", action="store_true")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("evaluate", help="PSNR/SSIM report for a folder of reconstructions")
    v.add_argument("--recon", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--method", default="unknown")
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, LensError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
