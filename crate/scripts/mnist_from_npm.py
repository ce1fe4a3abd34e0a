#!/usr/bin/env python3
"""Convert the digit JSON shipped in the `mnist` npm package into IDX files.

The package carries 10,000 real MNIST digits (28x28, values byte/255 rounded
to three decimals). We split them per class: the first `--train-per-class`
digits of each class go to the training file, the rest to the test file.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
import os
import struct


def write_idx_images(path, images):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train-per-class", type=int, default=800)
    args = ap.parse_args()

    per_class = []
    for d in range(10):
        with open(os.path.join(args.digits_dir, f"{d}.json")) as f:
            raw = json.load(f)["data"]
        imgs = [
            [min(255, max(0, round(v * 255))) for v in raw[i : i + 784]]
            for i in range(0, len(raw), 784)
        ]
        per_class.append(imgs)

    train, test = [], []
    # interleave classes so a prefix of either file is roughly balanced
    for split, lo, hi in ((train, 0, args.train_per_class), (test, args.train_per_class, None)):
        pools = [imgs[lo:hi] for imgs in per_class]
        longest = max(len(p) for p in pools)
        for i in range(longest):
            for label, pool in enumerate(pools):
                if i < len(pool):
                    split.append((pool[i], label))

    os.makedirs(args.out_dir, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(args.out_dir, f"{name}-images-idx3-ubyte.gz"), [s[0] for s in split])
        write_idx_labels(os.path.join(args.out_dir, f"{name}-labels-idx1-ubyte.gz"), [s[1] for s in split])
        print(name, len(split))


if __name__ == "__main__":
    main()
