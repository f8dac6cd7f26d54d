"""Rebuild the bundled 0/1 digit subset from mlxtend's 5000-sample MNIST extract.

usage: python3 tools/vendor_digits.py path/to/mlxtend-*.whl
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from dpisim.datasets import BUNDLED, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel: str) -> None:
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    train, test = [], []
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        half = len(idx) // 2
        train.extend(idx[:half])
        test.extend(idx[half:])
    out = Path(__file__).resolve().parents[1] / "src" / "dpisim" / "data"
    for split, idx in (("train", sorted(train)), ("test", sorted(test))):
        img_name, lab_name = BUNDLED[split]
        write_idx(out / img_name, images[idx])
        write_idx(out / lab_name, labels[idx])
        print(split, len(idx), np.bincount(labels[idx]))


if __name__ == "__main__":
    main(sys.argv[1])
