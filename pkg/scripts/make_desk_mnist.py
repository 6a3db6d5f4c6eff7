"""Build the bundled desk-scale MNIST IDX files.

Source: the ``mnist@1.1.0`` npm package, which ships 10,000 MNIST digits as
JSON arrays of ``byte / 255`` values rounded to three decimals.  The bytes are
recovered exactly with ``round(v * 255)``.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/make_desk_mnist.py package/src/digits src/sfdd/data/desk
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

N_TEST = 2000
SPLIT_SEED = 20240101


def write_idx(path, images, labels_path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(labels_path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    imgs, labs = [], []
    for digit in range(10):
        raw = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        pix = np.rint(raw * 255.0).astype(np.uint8).reshape(-1, 28, 28)
        imgs.append(pix)
        labs.append(np.full(len(pix), digit, dtype=np.uint8))
    imgs = np.concatenate(imgs)
    labs = np.concatenate(labs)
    order = np.random.default_rng(SPLIT_SEED).permutation(len(labs))
    imgs, labs = imgs[order], labs[order]
    dst.mkdir(parents=True, exist_ok=True)
    write_idx(dst / "train-images-idx3-ubyte.gz", imgs[N_TEST:],
              dst / "train-labels-idx1-ubyte.gz", labs[N_TEST:])
    write_idx(dst / "test-images-idx3-ubyte.gz", imgs[:N_TEST],
              dst / "test-labels-idx1-ubyte.gz", labs[:N_TEST])
    print(f"train={len(labs) - N_TEST} test={N_TEST} -> {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
