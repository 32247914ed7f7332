#!/usr/bin/env python3
"""Write a 5,000/1,000 MNIST subset in IDX format.

Source: the `mnist` npm package (10,000 MNIST digits stored as JSON with
pixel values already divided by 255 and rounded to 3 decimals).  Rounding
back to bytes is exact because 1/255 > 0.001.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(out_dir: Path, prefix: str, samples):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(samples)))
    for pixels, label in samples:
        images.extend(pixels)
        labels.append(label)
    (out_dir / f"{prefix}-images-idx3-ubyte").write_bytes(bytes(images))
    (out_dir / f"{prefix}-labels-idx1-ubyte").write_bytes(bytes(labels))


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for label in range(10):
        flat = json.loads((digits_dir / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            pixels = bytes(round(v * 255) for v in flat[i : i + 784])
            samples.append((pixels, label))
    random.Random(20190401).shuffle(samples)
    write_idx(out_dir, "train", samples[:5000])
    write_idx(out_dir, "t10k", samples[5000:6000])
    print(f"{len(samples)} digits read; wrote 5000 train / 1000 test to {out_dir}")


if __name__ == "__main__":
    main()
