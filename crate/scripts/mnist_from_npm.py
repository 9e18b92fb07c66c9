#!/usr/bin/env python3
"""Convert the digit bundle shipped in the npm `mnist` package into IDX files.

The package stores 10,000 MNIST digits as JSON arrays of pixel/255 rounded to
three decimals, one file per digit. Pixels are recovered exactly with
round(v * 255). Samples are interleaved across digits and split 80/20 into
train/test files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import struct
import sys
from pathlib import Path

SIDE = 28
PIXELS = SIDE * SIDE


def load(digits_dir):
    per_digit = []
    for d in range(10):
        flat = json.loads((Path(digits_dir) / f"{d}.json").read_text())["data"]
        assert len(flat) % PIXELS == 0
        imgs = [
            bytes(round(v * 255) for v in flat[i : i + PIXELS])
            for i in range(0, len(flat), PIXELS)
        ]
        per_digit.append(imgs)
    return per_digit


def write(out, name, images, labels):
    with open(out / f"{name}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with open(out / f"{name}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    digits_dir, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    per_digit = load(digits_dir)
    split = {"train": ([], []), "t10k": ([], [])}
    longest = max(len(v) for v in per_digit)
    for i in range(longest):
        for d, imgs in enumerate(per_digit):
            if i < len(imgs):
                name = "train" if i < int(0.8 * len(imgs)) else "t10k"
                split[name][0].append(imgs[i])
                split[name][1].append(d)
    for name, (images, labels) in split.items():
        write(out, name, images, labels)
        print(name, len(images))


if __name__ == "__main__":
    main()
