#!/usr/bin/env python3
"""Convert the 5000-image MNIST subset bundled with mlxtend into gzipped IDX files.

Usage: python3 scripts/mnist5k_to_idx.py <mlxtend wheel or mnist_5k.csv.gz> <out dir>

Writes train-{images-idx3,labels-idx1}-ubyte.gz (100 per class, 1000 rows) and
t10k-{images-idx3,labels-idx1}-ubyte.gz (400 per class, 4000 rows). Row order is a
fixed permutation so classes are interleaved.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def read_rows(path):
    if path.endswith(".whl"):
        with zipfile.ZipFile(path) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        with open(path, "rb") as f:
            raw = f.read()
    a = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    return a[:, :-1].astype(np.uint8), a[:, -1].astype(np.uint8)


def write_idx(path, images, labels):
    n = len(labels)
    with gzip.GzipFile(path + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(path + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())


def main():
    x, y = read_rows(sys.argv[1])
    out = sys.argv[2]
    rng = np.random.RandomState(0)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        train.extend(idx[:100])
        test.extend(idx[100:])
    train = rng.permutation(np.array(train))
    test = rng.permutation(np.array(test))
    write_idx(out + "/train", x[train], y[train])
    write_idx(out + "/t10k", x[test], y[test])


if __name__ == "__main__":
    main()
