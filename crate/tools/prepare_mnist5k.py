#!/usr/bin/env python3
"""Convert the 5000-image MNIST sample shipped with mlxtend into gzipped IDX files.

The sample holds 500 images per digit, sorted by label. The first 400 images of
each digit go to the training split and the remaining 100 to the test split.

    pip download --no-deps mlxtend -d /tmp/mlx
    python3 tools/prepare_mnist5k.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""

import gzip
import io
import os
import struct
import sys
import zipfile

TRAIN_PER_CLASS = 400


def read_rows(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    text = gzip.decompress(raw).decode()
    rows = []
    for line in text.splitlines():
        vals = [int(v) for v in line.split(",")]
        rows.append((vals[:-1], vals[-1]))
    return rows


def write_idx(path, images, labels):
    img = io.BytesIO()
    img.write(struct.pack(">IIII", 2051, len(images), 28, 28))
    for px in images:
        img.write(bytes(px))
    lab = io.BytesIO()
    lab.write(struct.pack(">II", 2049, len(labels)))
    lab.write(bytes(labels))
    # mtime=0 keeps the output byte-identical across runs
    with open(path + "-images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(img.getvalue(), mtime=0))
    with open(path + "-labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(lab.getvalue(), mtime=0))


def main():
    wheel, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    seen = {}
    train, test = ([], []), ([], [])
    for px, label in read_rows(wheel):
        k = seen.get(label, 0)
        seen[label] = k + 1
        split = train if k < TRAIN_PER_CLASS else test
        split[0].append(px)
        split[1].append(label)
    write_idx(os.path.join(out, "train"), *train)
    write_idx(os.path.join(out, "t10k"), *test)
    print(f"train={len(train[1])} test={len(test[1])}")


if __name__ == "__main__":
    main()
