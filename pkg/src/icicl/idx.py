"""Reader and writer for the big-endian IDX files that MNIST ships in.

An IDX file starts with a 4-byte magic number: two zero bytes, a type code
(0x08 = unsigned byte) and the number of dimensions. Each dimension size then
follows as a big-endian uint32, and the raw row-major data comes last.
"""

import gzip
import os
import struct

import numpy as np

from .errors import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
IMAGE_SHAPE = (28, 28)

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read(path, magic, ndim):
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, blob[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    data = np.frombuffer(blob, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size < count:
        raise FormatError(f"{path}: expected {count} data bytes, found {data.size}")
    if data.size > count:
        raise FormatError(f"{path}: {data.size - count} trailing bytes after data")
    return data.reshape(dims)


def load_idx(images_path, labels_path):
    """Return ``(images uint8 [n, 28, 28], labels uint8 [n])``."""
    images = _read(images_path, IMAGES_MAGIC, 3)
    if images.shape[1:] != IMAGE_SHAPE:
        raise FormatError(f"{images_path}: images must be 28x28, got {images.shape[1:]}")
    labels = _read(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.copy(), labels.copy()


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``[n, rows, cols]`` and labels ``[n]`` as IDX files."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def find_split(directory, split="train"):
    """Paths of the image/label pair for ``split`` in ``directory`` (plain or ``.gz``)."""
    names = TRAIN_FILES if split == "train" else TEST_FILES
    out = []
    for name in names:
        for candidate in (name, name + ".gz"):
            p = os.path.join(directory, candidate)
            if os.path.exists(p):
                out.append(p)
                break
        else:
            raise FileNotFoundError(f"no {name}[.gz] in {directory}")
    return tuple(out)
