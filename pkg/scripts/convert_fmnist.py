"""Build Fashion-MNIST IDX files from the per-class JSON dumps of the
``fashion-mnist`` npm package.

Each class contributes its first 6000 images to train and the next 1000 to
test; empty rows in the dump are skipped. Each split is then shuffled with a
fixed seed so that taking the first k rows gives a class-balanced subset.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from sptlab.data import write_idx

PER_CLASS_TRAIN = 6000
PER_CLASS_TEST = 1000


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("clothes_dir", type=Path, help="directory holding 0.json ... 9.json")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    parts = {"train": ([], []), "t10k": ([], [])}
    for label in range(10):
        rows = json.loads((args.clothes_dir / f"{label}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == 784]  # the dump carries a few empty rows
        if len(rows) < PER_CLASS_TRAIN + PER_CLASS_TEST:
            raise SystemExit(f"class {label}: only {len(rows)} images")
        arr = np.asarray(rows[:PER_CLASS_TRAIN + PER_CLASS_TEST], dtype=np.uint8).reshape(-1, 28, 28)
        for prefix, chunk in (("train", arr[:PER_CLASS_TRAIN]), ("t10k", arr[PER_CLASS_TRAIN:])):
            parts[prefix][0].append(chunk)
            parts[prefix][1].append(np.full(len(chunk), label, dtype=np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for prefix, (imgs, labels) in parts.items():
        imgs, labels = np.concatenate(imgs), np.concatenate(labels)
        order = rng.permutation(len(labels))
        write_idx(args.out_dir / f"{prefix}-images-idx3-ubyte", imgs[order])
        write_idx(args.out_dir / f"{prefix}-labels-idx1-ubyte", labels[order])
        print(prefix, imgs.shape[0])


if __name__ == "__main__":
    main()
