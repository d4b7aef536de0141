"""Pixelwise colour non-local means."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numba
import numpy as np

from .imagecore import ImageF32, NoiseSpec


@dataclass(frozen=True)
class NlmParams:
    patch_radius: int = 1
    search_radius: int = 10
    h_factor: float = 0.55
    sigma_offset: bool = True

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.search_radius < self.patch_radius:
            raise ValueError("search_radius must be >= patch_radius")
        if not self.h_factor > 0:
            raise ValueError("h_factor must be > 0")

    def describe(self) -> dict:
        """Self-describing record of the weighting variant, for run metadata."""
        return {
            "algorithm": "nlm-pixelwise",
            "distance": "mean squared patch difference, pooled over RGB",
            "weight": "exp(-max(d2 - 2 sigma^2, 0) / h^2)" if self.sigma_offset
            else "exp(-d2 / h^2)",
            "center_weight": "max neighbour weight",
            **asdict(self),
        }


@numba.njit(cache=True)
def _nlm_kernel(pad, H, W, pr, sr, sigma2, h2, offset):
    C = pad.shape[0]
    R = sr + pr
    side = 2 * pr + 1
    norm = 1.0 / (C * side * side)
    num = np.zeros((C, H, W))
    den = np.zeros((H, W))
    wmax = np.zeros((H, W))
    Hd = H + 2 * pr
    Wd = W + 2 * pr
    diff = np.empty((Hd, Wd))
    rowsum = np.empty((Hd, W))
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            if dy == 0 and dx == 0:
                continue
            # squared colour difference over the region patches can touch
            for a in range(Hd):
                pa = R - pr + a
                for b in range(Wd):
                    pb = R - pr + b
                    s = 0.0
                    for c in range(C):
                        t = pad[c, pa, pb] - pad[c, pa + dy, pb + dx]
                        s += t * t
                    diff[a, b] = s
            # horizontal then vertical box sums, summed in a fixed order
            for a in range(Hd):
                for j in range(W):
                    s = 0.0
                    for k in range(side):
                        s += diff[a, j + k]
                    rowsum[a, j] = s
            for i in range(H):
                for j in range(W):
                    s = 0.0
                    for k in range(side):
                        s += rowsum[i + k, j]
                    d2 = s * norm
                    if offset:
                        d2 -= 2.0 * sigma2
                        if d2 < 0.0:
                            d2 = 0.0
                    # weights below exp(-600) are zeroed so products never go subnormal
                    x = d2 / h2
                    w = np.exp(-x) if x < 600.0 else 0.0
                    if w > wmax[i, j]:
                        wmax[i, j] = w
                    den[i, j] += w
                    for c in range(C):
                        num[c, i, j] += w * pad[c, R + i + dy, R + j + dx]
    out = np.empty((C, H, W))
    for i in range(H):
        for j in range(W):
            wc = wmax[i, j]
            if wc == 0.0:
                wc = 1.0
            d = den[i, j] + wc
            for c in range(C):
                out[c, i, j] = (num[c, i, j] + wc * pad[c, R + i, R + j]) / d
    return out


def nlm_denoise(y: ImageF32, sigma: NoiseSpec, p: NlmParams = NlmParams()) -> ImageF32:
    """Non-local means with patch distances pooled over the colour channels.

    Borders are handled by reflecting the image by ``search_radius +
    patch_radius``. A zero noise level returns the input unchanged.
    """
    if y.channels != 3:
        raise ValueError(f"nlm_denoise expects a 3-channel image, got {y.channels}")
    if sigma.sigma255 == 0:
        return ImageF32(y.data.copy())
    R = p.search_radius + p.patch_radius
    data = y.data.astype(np.float64)
    # np.pad 'reflect' may need several bounces when R exceeds the image size
    pad = np.pad(data, ((0, 0), (R, R), (R, R)), mode="reflect")
    s = sigma.sigma
    h = p.h_factor * s
    out = _nlm_kernel(pad, y.height, y.width, p.patch_radius, p.search_radius,
                      s * s, h * h, p.sigma_offset)
    return ImageF32(out.astype(np.float32))
