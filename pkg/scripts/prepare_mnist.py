"""Write MNIST IDX files from a locally available copy.

With no network access to the canonical MNIST mirrors, this converts the
5000-image MNIST training subset that ships inside the ``mlxtend`` wheel
(``mlxtend/data/data/mnist_5k.csv.gz``, 500 images per digit) into the
standard ``train-images-idx3-ubyte`` / ``train-labels-idx1-ubyte`` pair.
If the full IDX files are available, put them in the data directory
instead and skip this script.

    python scripts/prepare_mnist.py --out data/mnist
"""

import argparse
import gzip
import os

import numpy as np

from pathnet.tasks import load_idx, write_idx


def mlxtend_csv() -> str:
    import mlxtend

    return os.path.join(os.path.dirname(mlxtend.__file__), "data", "data", "mnist_5k.csv.gz")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", help="CSV with 784 pixel columns then the label (default: mlxtend's bundled copy)")
    ap.add_argument("--out", default="data/mnist")
    args = ap.parse_args()

    path = args.csv or mlxtend_csv()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.float64)
    images = table[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)

    os.makedirs(args.out, exist_ok=True)
    img_path = os.path.join(args.out, "train-images-idx3-ubyte")
    lab_path = os.path.join(args.out, "train-labels-idx1-ubyte")
    write_idx(img_path, images)
    write_idx(lab_path, labels)
    x, y = load_idx(img_path, lab_path)
    print(f"wrote {len(y)} images to {args.out}; per-digit counts {np.bincount(y, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
