#!/usr/bin/env python3
"""Build the desk-scale MNIST IDX files used by the acceptance suite.

No network access to the MNIST host is assumed. Two MNIST subsets that ship
inside package-mirror artifacts are used instead:

  * mlxtend wheel   mlxtend/data/data/mnist_5k.csv.gz   5000 training digits
                    (raw 8-bit intensities, 500 per class)
  * npm "mnist"     src/digits/<d>.json                 ~1000 digits per class
                    (intensities in [0,1] with three decimals)

Outputs (big-endian IDX, magic 0x00000803 / 0x00000801):

  data/mnist/train-5k-images-idx3-ubyte   train-5k-labels-idx1-ubyte
  data/mnist/test-1k-images-idx3-ubyte    test-1k-labels-idx1-ubyte

Both sets are written with classes interleaved (0,1,...,9,0,1,...). The first
500 digits of each npm class file are exactly the mlxtend training digits, so the
held-out set starts at index 500 of every class.

Usage:
  tools/fetch_mnist.py [--wheel PATH] [--npm-tgz PATH] [--out data/mnist]

Missing artifacts are fetched with `pip download` / `npm pack`.
"""

import argparse
import gzip
import io
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile
import zipfile

SIDE = 28


def write_idx(prefix: pathlib.Path, images, labels):
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def interleave(per_class, count_per_class):
    images, labels = [], []
    for i in range(count_per_class):
        for digit in range(10):
            images.append(per_class[digit][i])
            labels.append(digit)
    return images, labels


def load_mlxtend(wheel: pathlib.Path):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    per_class = {d: [] for d in range(10)}
    for line in raw.decode().splitlines():
        values = [int(float(v)) for v in line.split(",")]
        per_class[values[-1]].append(values[:-1])
    return per_class


def load_npm(tgz: pathlib.Path):
    per_class = {}
    with tarfile.open(tgz) as t:
        for digit in range(10):
            member = t.extractfile(f"package/src/digits/{digit}.json")
            data = json.load(io.TextIOWrapper(member))["data"]
            n = len(data) // (SIDE * SIDE)
            per_class[digit] = [
                [min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784]]
                for k in range(n)
            ]
    return per_class


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel", type=pathlib.Path)
    ap.add_argument("--npm-tgz", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist"))
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    tmp = pathlib.Path(tempfile.mkdtemp())
    if args.wheel is None:
        subprocess.run(["pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", str(tmp)], check=True)
        args.wheel = next(tmp.glob("mlxtend-*.whl"))
    if args.npm_tgz is None:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True)
        args.npm_tgz = next(tmp.glob("mnist-*.tgz"))

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-5k", *interleave(load_mlxtend(args.wheel), 500))
    held_out = {d: v[500:] for d, v in load_npm(args.npm_tgz).items()}
    write_idx(args.out / "test-1k", *interleave(held_out, args.test_per_class))
    print(f"wrote IDX files under {args.out}")


if __name__ == "__main__":
    main()
