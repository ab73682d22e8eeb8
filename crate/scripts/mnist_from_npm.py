#!/usr/bin/env python3
"""Build gzipped IDX files from the digit JSON shipped in the npm `mnist` package.

The package (https://www.npmjs.com/package/mnist) bundles roughly ten thousand
MNIST digits as per-class JSON arrays with pixel values in [0, 1].  This script
re-quantizes them to bytes, interleaves the classes with a fixed shuffle and
writes `images.idx3-ubyte.gz` / `labels.idx1-ubyte.gz`.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def main() -> None:
    src = Path(sys.argv[1])
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)

    samples = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        for i in range(count):
            chunk = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            pixels = bytes(min(255, max(0, round(v * 255))) for v in chunk)
            samples.append((digit, pixels))

    random.Random(20230101).shuffle(samples)

    with gzip.GzipFile(out / "images.idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE))
        for _, pixels in samples:
            f.write(pixels)
    with gzip.GzipFile(out / "labels.idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for label, _ in samples))

    print(f"wrote {len(samples)} samples to {out}")


if __name__ == "__main__":
    main()
