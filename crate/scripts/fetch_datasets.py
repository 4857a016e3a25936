#!/usr/bin/env python3
"""Materialize the MNIST and CIFAR10 subsets used by the desk-scale runs.

The sandboxed build has no direct dataset access, so the images are pulled
from package registries that ship them as payload:

  * mlxtend (PyPI) bundles a 5,000-image MNIST subset as CSV.
  * tfjs-cifar10 (npm) ships the CIFAR10 batches as 1024x10000 PNG strips,
    one 32x32 RGB image per row.

Output layout (one PNG per image, zero-padded index as file name):

  data/mnist/00000.png ...            28x28 grayscale, 5,000 images
  data/cifar10/00000.png ...          32x32 RGB, first --cifar-count train images
"""
import argparse
import csv
import gzip
import io
import subprocess
import sys
import tarfile
import tempfile
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image


def fetch_mnist(out: Path, work: Path) -> None:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-d", str(work), "mlxtend==0.24.0"],
        check=True,
    )
    wheel = next(work.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    rows = list(csv.reader(io.StringIO(raw)))
    out.mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(rows):
        pixels = np.array([int(float(v)) for v in row[:784]], dtype=np.uint8).reshape(28, 28)
        Image.fromarray(pixels, mode="L").save(out / f"{i:05d}.png")
    print(f"mnist: wrote {len(rows)} images to {out}")


def fetch_cifar(out: Path, work: Path, count: int) -> None:
    subprocess.run(["npm", "pack", "tfjs-cifar10@1.1.1", "--pack-destination", str(work)], check=True)
    tgz = next(work.glob("tfjs-cifar10-*.tgz"))
    with tarfile.open(tgz) as t:
        strip = t.extractfile("package/data_batch_1.png").read()
    arr = np.array(Image.open(io.BytesIO(strip)).convert("RGB"))
    images = arr.reshape(arr.shape[0], 32, 32, 3)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(min(count, images.shape[0])):
        Image.fromarray(images[i], mode="RGB").save(out / f"{i:05d}.png")
    print(f"cifar10: wrote {min(count, images.shape[0])} images to {out}")


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    p.add_argument("--cifar-count", type=int, default=2000)
    args = p.parse_args()
    root = Path(args.out)
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(tmp)
        if not (root / "mnist").exists():
            fetch_mnist(root / "mnist", work)
        if not (root / "cifar10").exists():
            fetch_cifar(root / "cifar10", work, args.cifar_count)


if __name__ == "__main__":
    main()
