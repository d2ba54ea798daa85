"""Convert the 5000-digit MNIST excerpt shipped with mlxtend into gzipped IDX files.

Usage: python3 tools/mnist5k_to_idx.py <mlxtend wheel> <out dir>

Per class, the first 300 digits go to the train split and the remaining 200
to the test split, so both splits are class-balanced.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, arr, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        if labels:
            f.write(struct.pack(">II", 0x00000801, arr.shape[0]))
        else:
            f.write(struct.pack(">IIII", 0x00000803, arr.shape[0], 28, 28))
        f.write(arr.astype(np.uint8).tobytes())


def main(wheel, out):
    z = zipfile.ZipFile(wheel)
    raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    table = np.loadtxt(io.StringIO(raw), delimiter=",")
    x, y = table[:, :-1], table[:, -1].astype(int)
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train.extend(idx[:300])
        test.extend(idx[300:])
    for name, idx in (("train", sorted(train)), ("t10k", sorted(test))):
        write_idx(f"{out}/{name}-images-idx3-ubyte.gz", x[idx], False)
        write_idx(f"{out}/{name}-labels-idx1-ubyte.gz", y[idx], True)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
