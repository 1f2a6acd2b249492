"""Write a small MNIST subset in IDX format.

Source: the 5000-image MNIST sample bundled with the `mlxtend` wheel
(mlxtend/data/data/mnist_5k.csv.gz; 784 pixel columns then the label).

    pip download --no-deps mlxtend -d /tmp
    python3 scripts/make_mnist_fixture.py /tmp/mlxtend-*.whl data/mnist
"""

import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

N_TRAIN = 1000
N_TEST = 100
SEED = 0


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = gzip.decompress(zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(raw.decode().splitlines(), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1], table[:, -1]
    order = np.random.default_rng(SEED).permutation(len(labels))
    train, test = order[:N_TRAIN], order[N_TRAIN:N_TRAIN + N_TEST]
    write_images(out / "train-images-idx3-ubyte", images[train])
    write_labels(out / "train-labels-idx1-ubyte", labels[train])
    write_images(out / "t10k-images-idx3-ubyte", images[test])
    write_labels(out / "t10k-labels-idx1-ubyte", labels[test])
    print("train class counts", np.bincount(labels[train], minlength=10))
    print("test class counts", np.bincount(labels[test], minlength=10))


if __name__ == "__main__":
    main()
