#!/usr/bin/env python3
"""Rebuild data/mnist10k from the 10,000 MNIST digits bundled in the npm ``mnist`` package.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist10k

The package stores pixels as byte/255 rounded to three decimals; rounding
``value * 255`` recovers the original bytes exactly. The 10k digits are split
8,000 / 2,000 (stratified, seed 0) into train/test IDX files.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from stealthbfa.data import LabeledDataset, stratified_split, write_idx_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        values = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"], dtype=np.float64)
        scaled = values * 255.0
        as_bytes = np.rint(scaled)
        assert np.abs(scaled - as_bytes).max() < 0.25, "pixel values are not byte/255 multiples"
        images.append(as_bytes.reshape(-1, 28, 28))
        labels.append(np.full(images[-1].shape[0], digit))
    full = LabeledDataset(np.concatenate(images)[:, None] / 255.0, np.concatenate(labels))
    train, test = stratified_split(full, 0.2, seed=args.seed)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx_dataset(args.out_dir / "train-images-idx3-ubyte.gz", args.out_dir / "train-labels-idx1-ubyte.gz", train)
    write_idx_dataset(args.out_dir / "test-images-idx3-ubyte.gz", args.out_dir / "test-labels-idx1-ubyte.gz", test)
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out_dir}")


if __name__ == "__main__":
    main()
