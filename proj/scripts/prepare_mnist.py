#!/usr/bin/env python3
"""Convert MNIST parquet shards into the four standard IDX files.

The toolkit reads the classic IDX layout (big-endian header, unsigned-byte
payload). Public MNIST mirrors increasingly ship parquet with PNG-encoded
images instead, so this script bridges the two:

    python3 scripts/prepare_mnist.py \
        --train-parquet mnist_train.parquet \
        --test-parquet mnist_test.parquet \
        --out data/mnist

It writes train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte, and t10k-labels-idx1-ubyte under --out. The output is
deterministic: rows are emitted in parquet order, so the same input always
produces byte-identical files.
"""

import argparse
import io
import struct
import sys
from pathlib import Path

import numpy as np
import pyarrow.parquet as pq
from PIL import Image

IMAGE_MAGIC = 2051  # 0x00000803: unsigned byte, 3 dims
LABEL_MAGIC = 2049  # 0x00000801: unsigned byte, 1 dim
SIDE = 28


def load_split(parquet_path: Path) -> tuple[np.ndarray, np.ndarray]:
    table = pq.read_table(parquet_path, columns=["image", "label"])
    rows = table.num_rows
    images = np.empty((rows, SIDE, SIDE), dtype=np.uint8)
    decoded = 0
    for batch in table.to_batches():
        img_col = batch.column("image")
        for record in img_col.to_pylist():
            with Image.open(io.BytesIO(record["bytes"])) as im:
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            if arr.shape != (SIDE, SIDE):
                raise SystemExit(f"{parquet_path}: image {decoded} has shape {arr.shape}, "
                                 f"expected ({SIDE}, {SIDE})")
            images[decoded] = arr
            decoded += 1
    labels = table.column("label").to_numpy().astype(np.uint8)
    if decoded != rows or len(labels) != rows:
        raise SystemExit(f"{parquet_path}: decoded {decoded} images for {len(labels)} labels")
    if labels.min() < 0 or labels.max() > 9:
        raise SystemExit(f"{parquet_path}: labels outside 0..9")
    return images, labels


def write_idx_images(path: Path, images: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGE_MAGIC, images.shape[0], SIDE, SIDE))
        f.write(images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train-parquet", required=True, type=Path)
    ap.add_argument("--test-parquet", required=True, type=Path)
    ap.add_argument("--out", default=Path("data/mnist"), type=Path)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    for parquet, img_name, lbl_name in [
        (args.train_parquet, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (args.test_parquet, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ]:
        images, labels = load_split(parquet)
        write_idx_images(args.out / img_name, images)
        write_idx_labels(args.out / lbl_name, labels)
        hist = np.bincount(labels, minlength=10)
        print(f"{parquet} -> {img_name} / {lbl_name}: {len(labels)} records, "
              f"label histogram {hist.tolist()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
