#!/usr/bin/env python3
"""Convert the 5000-image MNIST subset shipped in the mlxtend wheel to IDX files.

Usage: python3 tools/mnist5k_to_idx.py <mlxtend-*.whl> <out-dir>

Get the wheel with `pip download --no-deps mlxtend`. Writes gzipped
images-idx3-ubyte.gz / labels-idx1-ubyte.gz (big-endian IDX, as published
for MNIST) in the original row order.
"""
import gzip
import struct
import sys
import zipfile


def main():
    wheel, out = sys.argv[1], sys.argv[2]
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    rows = [line.split(",") for line in raw.splitlines() if line]
    images = bytearray()
    labels = bytearray()
    for row in rows:
        pixels = [int(float(v)) for v in row[:-1]]
        assert len(pixels) == 784
        images.extend(bytes(pixels))
        labels.append(int(float(row[-1])))
    n = len(rows)
    # mtime=0 keeps the gzip output byte-stable across runs
    with open(f"{out}/images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images), mtime=0))
    with open(f"{out}/labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(struct.pack(">II", 0x801, n) + bytes(labels), mtime=0))
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
