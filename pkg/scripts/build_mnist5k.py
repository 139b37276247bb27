"""Convert mlxtend's bundled ``mnist_5k.csv.gz`` into IDX files plus a manifest.

The CSV holds 5000 MNIST digits (500 per class), 784 pixel columns and a
label column. Each class is split 400/100 into train/test with a fixed seed.

    pip download --no-deps mlxtend -d /tmp/wheels
    python scripts/build_mnist5k.py /tmp/wheels/mlxtend-*.whl data/mnist5k
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from aplnet.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(source: str, out_dir: str, seed: int = 20150101, test_per_class: int = 100):
    src = Path(source)
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(members, size=test_per_class, replace=False))
    is_test = np.zeros(len(labels), dtype=bool)
    is_test[test_idx] = True
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, mask in (("train", ~is_test), ("test", is_test)):
        write_idx(out / f"{split}-images-idx3-ubyte.gz", images[mask])
        write_idx(out / f"{split}-labels-idx1-ubyte.gz", labels[mask])
    (out / "manifest.txt").write_text(
        "# 5000 MNIST digits split 4000 train / 1000 test (stratified)\n"
        "task = classification\n"
        "train_images = train-images-idx3-ubyte.gz\n"
        "train_labels = train-labels-idx1-ubyte.gz\n"
        "test_images = test-images-idx3-ubyte.gz\n"
        "test_labels = test-labels-idx1-ubyte.gz\n"
    )
    print(f"wrote {(~is_test).sum()} train / {is_test.sum()} test samples to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
