"""Write procedural scene images and simulate a paired dataset from them.

    python3 scripts/make_scenes.py --out runs/data --count 220 --geometry 64x64 --psf two_zone
"""
import argparse
from pathlib import Path

from lenslpd import cli
from lenslpd.calibration import write_scene_images


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--count", type=int, default=220)
    ap.add_argument("--size", type=int, default=128, help="side of the written scene images")
    ap.add_argument("--geometry", default="64x64")
    ap.add_argument("--psf", default="caustic")
    ap.add_argument("--noise", type=float, default=0.01)
    ap.add_argument("--split", type=float, default=200 / 220)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    images = a.out / "images"
    write_scene_images(images, a.count, (a.size, a.size), a.seed)
    return cli.main(["simulate", "--images", str(images), "--out", str(a.out / "dataset"),
                     "--geometry", a.geometry, "--psf", a.psf, "--noise", str(a.noise),
                     "--split", str(a.split), "--seed", str(a.seed)])


if __name__ == "__main__":
    raise SystemExit(main())
