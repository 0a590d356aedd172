"""Build the fixed 2000-image MNIST subset shipped in data/.

Source: the 5000-image MNIST excerpt bundled with mlxtend
(``mlxtend/data/data/mnist_5k.csv.gz``; 784 pixel columns, label last).
200 images per digit are drawn with a fixed seed and written, shuffled,
as gzipped IDX files.

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from dcsep.data import ImageDataset, load_idx, save_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv(source):
    source = Path(source)
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as zf:
            raw = zf.read(MEMBER)
    else:
        raw = source.read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    return table[:, :-1].astype(np.uint8), table[:, -1].astype(np.int64)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", help="mlxtend wheel or mnist_5k.csv.gz")
    parser.add_argument("out_dir")
    parser.add_argument("--per-class", type=int, default=200)
    parser.add_argument("--seed", type=int, default=20190101)
    args = parser.parse_args(argv)

    pixels, labels = read_csv(args.source)
    rng = np.random.default_rng(args.seed)
    chosen = np.concatenate([
        rng.choice(np.flatnonzero(labels == c), size=args.per_class, replace=False)
        for c in range(10)])
    chosen = chosen[rng.permutation(len(chosen))]

    images = (pixels[chosen].reshape(-1, 1, 28, 28) / 255.0).astype(np.float32)
    ds = ImageDataset(images=images, labels=labels[chosen], class_count=10)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_path = out / "mnist2k-images-idx3-ubyte.gz"
    lbl_path = out / "mnist2k-labels-idx1-ubyte.gz"
    save_idx(ds, img_path, lbl_path)

    check = load_idx(img_path, lbl_path)
    assert np.array_equal(np.rint(check.images * 255), np.rint(images * 255))
    assert np.array_equal(check.labels, ds.labels)
    print(f"wrote {len(ds)} images to {out}")


if __name__ == "__main__":
    main()
