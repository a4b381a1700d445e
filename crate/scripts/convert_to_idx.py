#!/usr/bin/env python3
"""Convert locally downloaded MNIST, USPS and SVHN into the IDX layout read by `fan`.

Output layout, one directory per dataset under the data root:

    <root>/<name>/train-images.idx   <root>/<name>/train-labels.idx
    <root>/<name>/test-images.idx    <root>/<name>/test-labels.idx

MNIST and USPS are written as [N, H, W] unsigned bytes (magic 0x00000803),
SVHN as [N, 3, 32, 32] (magic 0x00000804). Labels use magic 0x00000801 and
SVHN's digit "0" (class 10 in the original files) is stored as 0. Resizing
and grayscale conversion happen inside `fan` at load time.

The sources are read with torchvision's dataset classes with download
disabled, so they must already be present under --source in torchvision's
directory layout (e.g. MNIST/raw/, usps.bz2 and usps.t.bz2, train_32x32.mat
and test_32x32.mat).

    python scripts/convert_to_idx.py --source ~/datasets --root ~/fan-data
"""

import argparse
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.tobytes())


def write_split(root, name, split, images, labels):
    out = root / name
    out.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        sys.exit(f"{name}/{split}: {len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() > 9:
        sys.exit(f"{name}/{split}: labels outside 0..9")
    magic = {3: 0x803, 4: 0x804}[images.ndim]
    write_idx(out / f"{split}-images.idx", images, magic)
    write_idx(out / f"{split}-labels.idx", labels.astype(np.uint8), 0x801)
    print(f"{name}/{split}: {images.shape} -> {out}")


def convert_mnist(source, root):
    from torchvision.datasets import MNIST

    for split, train in (("train", True), ("test", False)):
        ds = MNIST(source, train=train, download=False)
        write_split(root, "mnist", split, ds.data.numpy(), ds.targets.numpy())


def convert_usps(source, root):
    from torchvision.datasets import USPS

    for split, train in (("train", True), ("test", False)):
        ds = USPS(source, train=train, download=False)
        write_split(root, "usps", split, ds.data, ds.targets)


def convert_svhn(source, root):
    from torchvision.datasets import SVHN

    for split in ("train", "test"):
        ds = SVHN(source, split=split, download=False)
        labels = np.asarray(ds.labels) % 10
        write_split(root, "svhn", split, ds.data, labels)


CONVERTERS = {"mnist": convert_mnist, "usps": convert_usps, "svhn": convert_svhn}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--source", type=Path, required=True, help="directory holding the downloaded datasets")
    p.add_argument("--root", type=Path, required=True, help="data root to write (FAN_DATA_ROOT)")
    p.add_argument("datasets", nargs="*", default=list(CONVERTERS), choices=list(CONVERTERS))
    args = p.parse_args()
    for name in args.datasets:
        CONVERTERS[name](str(args.source), args.root)


if __name__ == "__main__":
    main()
