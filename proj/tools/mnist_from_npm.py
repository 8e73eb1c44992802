#!/usr/bin/env python3
"""Convert the digit subset shipped in the npm `mnist` package to IDX files.

The package stores 10000 MNIST digits as JSON arrays of pixel/255 rounded to
three decimals, which maps back to the original bytes exactly. The digits are
shuffled with a fixed seed and split into a 9000-image train file and a
1000-image test file, both gzip-compressed IDX.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the output byte-stable across runs
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(header)
        f.write(payload)


def main():
    if len(sys.argv) != 3:
        sys.exit("usage: mnist_from_npm.py <digits-dir> <out-dir>")
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)

    samples = []
    for digit in range(10):
        values = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(values) % 784 == 0
        for i in range(len(values) // 784):
            pixels = bytes(round(v * 255) for v in values[i * 784:(i + 1) * 784])
            samples.append((pixels, digit))

    random.Random(20190114).shuffle(samples)
    splits = {"train": samples[:9000], "t10k": samples[9000:]}
    for name, rows in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x00000803,
                  [len(rows), 28, 28], b"".join(p for p, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x00000801,
                  [len(rows)], bytes(label for _, label in rows))
        print(f"{name}: {len(rows)} images")


if __name__ == "__main__":
    main()
