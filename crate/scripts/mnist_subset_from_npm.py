#!/usr/bin/env python3
"""Rebuild a 10,000-digit MNIST subset as standard gzipped IDX files.

The npm package `mnist` (MIT) ships 10,000 MNIST digits as JSON arrays of
pixel intensities rounded to three decimals; rounding v * 255 recovers the
original bytes. The digits are shuffled with a fixed seed and split into
8,000 training and 2,000 test records.

usage: scripts/mnist_subset_from_npm.py <unpacked npm package dir> <out dir>
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    scripts/mnist_subset_from_npm.py package data/mnist
"""
import gzip
import json
import os
import random
import struct
import sys


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = sys.argv[1], sys.argv[2]
    records = []
    for digit in range(10):
        with open(os.path.join(src, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i : i + 784]]
            records.append((px, digit))
    random.Random(20240501).shuffle(records)
    train, test = records[:8000], records[8000:]
    os.makedirs(out, exist_ok=True)
    write_images(os.path.join(out, "train-images-idx3-ubyte.gz"), [r[0] for r in train])
    write_labels(os.path.join(out, "train-labels-idx1-ubyte.gz"), [r[1] for r in train])
    write_images(os.path.join(out, "t10k-images-idx3-ubyte.gz"), [r[0] for r in test])
    write_labels(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), [r[1] for r in test])
    print(f"{len(records)} digits -> {len(train)} train / {len(test)} test in {out}")


if __name__ == "__main__":
    main()
