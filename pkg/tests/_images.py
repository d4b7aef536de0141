"""Deterministic test images built from scikit-image's bundled photographs."""

from __future__ import annotations

import numpy as np

from nldenoise.imagecore import ImageF32

DESK_SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "retina",
                "hubble_deep_field", "immunohistochemistry", "stereo_motorcycle")


def photo(name: str) -> ImageF32:
    from skimage import data

    arr = getattr(data, name)()
    if isinstance(arr, tuple):
        arr = arr[0]
    return ImageF32.from_hwc(arr.astype(np.float32) / 255.0)


def crops(img: ImageF32, size: int, count: int) -> list:
    """``count`` size x size crops spread evenly over the image grid."""
    rows = np.linspace(0, img.height - size, 3).astype(int)
    cols = np.linspace(0, img.width - size, 3).astype(int)
    corners = [(r, c) for r in rows for c in cols]
    picks = np.linspace(0, len(corners) - 1, count).round().astype(int)
    return [img.crop(*corners[i], size, size) for i in picks]


def desk_set(n: int = 50, size: int = 128):
    """(train, val) crops for desk-scale training; every fifth crop is held out."""
    per = -(-n // len(DESK_SOURCES))
    pool = []
    for name in DESK_SOURCES:
        pool.extend(crops(photo(name), size, per))
    pool = pool[:n]
    val = pool[4::5]
    train = [im for i, im in enumerate(pool) if i % 5 != 4]
    return train, val
