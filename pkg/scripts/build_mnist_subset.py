"""Rebuild data/mnist-10k from the digit bundle of the `mnist` npm package.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist-10k

The package stores 10,000 MNIST digits as per-class JSON arrays of pixel
values rounded to three decimals. Those values are byte-quantized, so
``round(v * 255)`` recovers the original uint8 pixels exactly. Samples are
interleaved with a fixed permutation so any prefix is class-balanced.
"""
from __future__ import annotations

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(digits_dir: str, out_dir: str) -> None:
    images, labels = [], []
    for digit in range(10):
        raw = json.loads((Path(digits_dir) / f"{digit}.json").read_text())["data"]
        pixels = np.rint(np.asarray(raw, dtype=np.float64) * 255).astype(np.uint8)
        pixels = pixels.reshape(-1, 28, 28)
        images.append(pixels)
        labels.append(np.full(len(pixels), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(20230101).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    # mtime=0 keeps the archives byte-reproducible
    with open(out / "mnist10k-images-idx3-ubyte.gz", "wb") as raw_f:
        with gzip.GzipFile(fileobj=raw_f, mode="wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, n, 28, 28) + images.tobytes())
    with open(out / "mnist10k-labels-idx1-ubyte.gz", "wb") as raw_f:
        with gzip.GzipFile(fileobj=raw_f, mode="wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, n) + labels.tobytes())
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
