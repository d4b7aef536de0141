"""Image container, Gaussian noise synthesis, CPSNR and PNG I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import png

PSNR_CAP_DB = 100.0


class ImageIOError(Exception):
    """Raised when a PNG cannot be read or written."""


@dataclass(frozen=True, eq=False)
class ImageF32:
    """Planar float32 image, ``data`` has shape (channels, height, width).

    Intensities live on the [0, 1] scale. Values outside that range are
    allowed in intermediate results (noisy inputs are never clamped).
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"expected (C,H,W) with C in (1,3), got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_hwc(cls, arr) -> "ImageF32":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            return cls(arr[None])
        return cls(np.moveaxis(arr, -1, 0))

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.data, 0, -1)

    def clamped(self) -> "ImageF32":
        return ImageF32(np.clip(self.data, 0.0, 1.0))

    def crop(self, top: int, left: int, height: int, width: int) -> "ImageF32":
        return ImageF32(self.data[:, top:top + height, left:left + width])


@dataclass(frozen=True)
class NoiseSpec:
    sigma255: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma255 >= 0:
            raise ValueError(f"sigma255 must be >= 0, got {self.sigma255}")

    @property
    def sigma(self) -> float:
        """Standard deviation on the [0, 1] intensity scale."""
        return self.sigma255 / 255.0


def gaussian_field(seed: int, shape) -> np.ndarray:
    """Standard normal samples (float64) via Box-Muller over PCG64 uniforms.

    PCG64 streams are identical across platforms, and Box-Muller only needs
    log/sqrt/cos/sin, so a given seed reproduces the same field everywhere.
    """
    n = int(np.prod(shape))
    rng = np.random.Generator(np.random.PCG64(seed))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1], keeps log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return z.reshape(shape)


def add_awgn(x: ImageF32, spec: NoiseSpec) -> ImageF32:
    """Return ``x + n`` with i.i.d. N(0, (sigma255/255)^2) noise; not clamped."""
    if spec.sigma255 == 0:
        return ImageF32(x.data.copy())
    noise = spec.sigma * gaussian_field(spec.seed, x.shape)
    return ImageF32((x.data.astype(np.float64) + noise).astype(np.float32))


def mse(ref: ImageF32, test: ImageF32) -> float:
    if ref.shape != test.shape:
        raise ValueError(f"dimension mismatch: {ref.shape} vs {test.shape}")
    diff = ref.data.astype(np.float64) - test.data.astype(np.float64)
    return float(np.mean(diff * diff))


def cpsnr(ref: ImageF32, test: ImageF32) -> float:
    """Composite PSNR in dB, peak 1.0, MSE pooled over all channels."""
    err = mse(ref, test)
    if err < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / err)


def pad_reflect(img: ImageF32, top: int, bottom: int, left: int, right: int) -> ImageF32:
    """Whole-sample symmetric padding: row [a,b,c] padded left by 2 -> [c,b,a,b,c]."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad sizes must be non-negative")
    if max(top, bottom) >= img.height or max(left, right) >= img.width:
        raise ValueError(
            f"pad ({top},{bottom},{left},{right}) too large for {img.height}x{img.width} image"
        )
    return ImageF32(np.pad(img.data, ((0, 0), (top, bottom), (left, right)), mode="reflect"))


def crop_pad(img: ImageF32, top: int, bottom: int, left: int, right: int) -> ImageF32:
    """Inverse of :func:`pad_reflect` for the same pad amounts."""
    return img.crop(top, left, img.height - top - bottom, img.width - left - right)


def load_png(path) -> ImageF32:
    path = Path(path)
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        # materialise every row inside the try so truncated streams fail here
        pixels = np.vstack([np.asarray(row, dtype=np.uint32) for row in rows])
    except FileNotFoundError as exc:
        raise ImageIOError(f"cannot open {path}: {exc}") from exc
    except (png.Error, OSError, ValueError, EOFError) as exc:
        raise ImageIOError(f"cannot decode {path}: {exc}") from exc
    if info.get("alpha"):
        raise ImageIOError(f"unsupported color type in {path}: alpha channel")
    planes = info["planes"]
    if planes not in (1, 3) or pixels.shape != (height, width * planes):
        raise ImageIOError(f"unsupported color type in {path}: {planes} planes")
    maxval = float(2 ** info["bitdepth"] - 1)
    arr = pixels.reshape(height, width, planes).astype(np.float64) / maxval
    return ImageF32.from_hwc(arr)


def save_png(img: ImageF32, path, bitdepth: int = 8) -> None:
    """Clamp to [0,1], quantize with round-half-up and write an 8/16-bit PNG."""
    if bitdepth not in (8, 16):
        raise ValueError("bitdepth must be 8 or 16")
    maxval = 2 ** bitdepth - 1
    q = np.floor(np.clip(img.data.astype(np.float64), 0.0, 1.0) * maxval + 0.5).astype(np.uint16)
    hwc = np.moveaxis(q, 0, -1).reshape(img.height, img.width * img.channels)
    writer = png.Writer(
        width=img.width,
        height=img.height,
        greyscale=img.channels == 1,
        bitdepth=bitdepth,
    )
    try:
        with open(path, "wb") as fh:
            writer.write(fh, hwc.tolist())
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc
