"""Deterministic synthetic classification tasks at desk scale.

Two tasks isolate the two halves of the receptive-field story:

* the *local* task hides its label in a single random patch's texture, so
  any model that can read one tile solves it;
* the *global* task XORs two texture bits planted in the first and last
  patch rows, so no predictor seeing only one end of the token sequence
  can beat chance - the desk-scale stand-in for the sequence-reversal
  ablation.

Generators are pure functions of (seed, n); datasets serialize to a flat
little-endian binary (magic ``LBDS``).
"""

from __future__ import annotations

import struct

import numpy as np

from .core import ShapeError, seeded_rng

PATCH = 4
NOISE = 0.1

# linearly separable 4x4 textures (vertical vs horizontal stripes)
TEXTURE_A = np.tile(np.array([1.0, -1.0, 1.0, -1.0], dtype=np.float32), (PATCH, 1))
TEXTURE_B = TEXTURE_A.T.copy()

_MAGIC = b"LBDS"
_VERSION = 1


def gen_local_task(seed: int, n: int, image_size: int = 32):
    """Images whose label is the texture orientation of one random patch."""
    if n < 1:
        raise ShapeError("need at least one sample")
    rng = seeded_rng(seed)
    grid = image_size // PATCH
    images = (NOISE * rng.standard_normal((n, image_size, image_size, 1))).astype(np.float32)
    labels = rng.integers(0, 2, size=n).astype(np.uint32)
    rows = rng.integers(0, grid, size=n)
    cols = rng.integers(0, grid, size=n)
    for i in range(n):
        tex = TEXTURE_B if labels[i] else TEXTURE_A
        r, c = rows[i] * PATCH, cols[i] * PATCH
        images[i, r : r + PATCH, c : c + PATCH, 0] += tex
    return images, labels


def gen_global_task(seed: int, n: int, image_size: int = 32, return_bits: bool = False):
    """Images labelled by the XOR of texture bits at the two ends.

    The first patch row carries bit 0, the last patch row carries bit 1,
    each encoded as stripe orientation in every patch of that row; the
    label is their XOR, so neither half alone predicts it.
    """
    if n < 1:
        raise ShapeError("need at least one sample")
    rng = seeded_rng(seed)
    images = (NOISE * rng.standard_normal((n, image_size, image_size, 1))).astype(np.float32)
    bit0 = rng.integers(0, 2, size=n).astype(np.uint32)
    bit1 = rng.integers(0, 2, size=n).astype(np.uint32)
    labels = (bit0 ^ bit1).astype(np.uint32)
    row_a = np.tile(TEXTURE_A, (1, image_size // PATCH))
    row_b = np.tile(TEXTURE_B, (1, image_size // PATCH))
    for i in range(n):
        images[i, :PATCH, :, 0] += row_b if bit0[i] else row_a
        images[i, -PATCH:, :, 0] += row_b if bit1[i] else row_a
    if return_bits:
        return images, labels, bit0, bit1
    return images, labels


def save_dataset(path, images: np.ndarray, labels: np.ndarray) -> None:
    n, H, W, C = images.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} images")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, n, H, W, C))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ShapeError(f"not a dataset file (magic {magic!r})")
        version, n, H, W, C = struct.unpack("<IIIII", fh.read(20))
        if version != _VERSION:
            raise ShapeError(f"unsupported dataset version {version}")
        images = np.frombuffer(fh.read(n * H * W * C * 4), dtype="<f4").reshape(n, H, W, C)
        labels = np.frombuffer(fh.read(n * 4), dtype="<u4").copy()
    return images.copy(), labels
