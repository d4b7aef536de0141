"""Two-stage colour BM3D (hard thresholding, then empirical Wiener).

Blocks are transformed with an orthonormal 8x8 DCT-II and groups with an
orthonormal Haar transform along the stacking dimension. Matching runs on the
luminance channel of the opponent colour space and the resulting coordinates
are shared by the chrominance channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

from .imagecore import ImageF32, NoiseSpec

_ALLOWED_MATCHES = (1, 2, 4, 8, 16, 32)

# Rows are mutually orthogonal: luminance, red-blue, and green-magenta axes.
OPPONENT = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [1 / 2, 0.0, -1 / 2],
        [1 / 4, -1 / 2, 1 / 4],
    ]
)
OPPONENT_ROW_NORMS = np.sqrt((OPPONENT ** 2).sum(axis=1))
OPPONENT_INV = OPPONENT.T / (OPPONENT_ROW_NORMS ** 2)


@dataclass(frozen=True)
class Bm3dStage:
    block: int = 8
    step: int = 3
    search: int = 39
    max_matches: int = 16
    match_threshold: float = 3000 / 255 ** 2  # mean squared difference per pixel

    def __post_init__(self):
        if self.max_matches not in _ALLOWED_MATCHES:
            raise ValueError(f"max_matches must be one of {_ALLOWED_MATCHES}")
        if self.block > self.search:
            raise ValueError("block must not exceed search")
        if self.step < 1:
            raise ValueError("step must be >= 1")


@dataclass(frozen=True)
class Bm3dProfile:
    stage1: Bm3dStage = field(default_factory=Bm3dStage)
    stage2: Bm3dStage = field(
        default_factory=lambda: Bm3dStage(max_matches=32, match_threshold=400 / 255 ** 2)
    )
    lambda3d: float = 2.7
    kaiser_beta: float = 2.0
    transform2d: str = "dct"
    transform1d: str = "haar"

    @classmethod
    def for_sigma(cls, sigma255: float) -> "Bm3dProfile":
        """Default profile; above sigma 40 both matching thresholds are doubled."""
        prof = cls()
        if sigma255 > 40:
            prof = replace(
                prof,
                stage1=replace(prof.stage1, match_threshold=2 * prof.stage1.match_threshold),
                stage2=replace(prof.stage2, match_threshold=2 * prof.stage2.match_threshold),
            )
        return prof

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Bm3dProfile":
        d = dict(d)
        s1 = Bm3dStage(**d.pop("stage1", {}))
        s2 = Bm3dStage(**d.pop("stage2", {}))
        return cls(stage1=s1, stage2=s2, **d)


@dataclass
class PatchGroup:
    """Matched block origins and their stacked (group, block, block) values."""

    coords: list
    stack: np.ndarray

    def __post_init__(self):
        n = len(self.coords)
        if n == 0 or n & (n - 1):
            raise ValueError(f"group size must be a power of two, got {n}")


def _as_sigma(sigma) -> float:
    if isinstance(sigma, NoiseSpec):
        return sigma.sigma
    return float(sigma)


def opponent_forward(img: ImageF32) -> ImageF32:
    if img.channels != 3:
        raise ValueError(f"opponent transform needs 3 channels, got {img.channels}")
    out = np.tensordot(OPPONENT, img.data.astype(np.float64), axes=1)
    return ImageF32(out.astype(np.float32))


def opponent_inverse(img: ImageF32) -> ImageF32:
    if img.channels != 3:
        raise ValueError(f"opponent transform needs 3 channels, got {img.channels}")
    out = np.tensordot(OPPONENT_INV, img.data.astype(np.float64), axes=1)
    return ImageF32(out.astype(np.float32))


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are basis functions."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def kaiser_window(block: int, beta: float) -> np.ndarray:
    w = np.kaiser(block, beta)
    return np.outer(w, w)


# ----------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _haar_forward(g, n):
    """In-place orthonormal Haar along axis 0 of g[:n]; coefficient 0 is DC."""
    m = g.shape[1]
    tmp = np.empty((n, m))
    length = n
    inv = 1.0 / math.sqrt(2.0)
    while length > 1:
        half = length // 2
        for i in range(half):
            for j in range(m):
                a = g[2 * i, j]
                b = g[2 * i + 1, j]
                tmp[i, j] = (a + b) * inv
                tmp[half + i, j] = (a - b) * inv
        for i in range(length):
            for j in range(m):
                g[i, j] = tmp[i, j]
        length = half


@numba.njit(cache=True)
def _haar_inverse(g, n):
    m = g.shape[1]
    tmp = np.empty((n, m))
    inv = 1.0 / math.sqrt(2.0)
    length = 2
    while length <= n:
        half = length // 2
        for i in range(half):
            for j in range(m):
                s = g[i, j]
                d = g[half + i, j]
                tmp[2 * i, j] = (s + d) * inv
                tmp[2 * i + 1, j] = (s - d) * inv
        for i in range(length):
            for j in range(m):
                g[i, j] = tmp[i, j]
        length *= 2


@numba.njit(cache=True)
def _match_one(img, r, c, block, half, max_matches, thr, rows, cols, dists):
    """Best matches of the block at (r, c); returns the power-of-two group size.

    Candidates are scanned row-major; ties keep scan order, and the reference
    block always occupies slot 0.
    """
    H, W = img.shape
    r0 = max(r - half, 0)
    r1 = min(r + half, H - block)
    c0 = max(c - half, 0)
    c1 = min(c + half, W - block)
    norm = 1.0 / (block * block)
    rows[0] = r
    cols[0] = c
    dists[0] = 0.0
    count = 1
    for i in range(r0, r1 + 1):
        for j in range(c0, c1 + 1):
            if i == r and j == c:
                continue
            bound = thr
            if count == max_matches and dists[count - 1] < bound:
                bound = dists[count - 1]
            lim = bound / norm
            s = 0.0
            for a in range(block):
                for b in range(block):
                    t = img[r + a, c + b] - img[i + a, j + b]
                    s += t * t
                if s > lim:
                    break
            d = s * norm
            if d > thr:
                continue
            if count == max_matches and d >= dists[count - 1]:
                continue
            # insertion keeps earlier scan positions ahead of equal distances
            k = count if count < max_matches else max_matches - 1
            while k > 1 and dists[k - 1] > d:
                dists[k] = dists[k - 1]
                rows[k] = rows[k - 1]
                cols[k] = cols[k - 1]
                k -= 1
            dists[k] = d
            rows[k] = i
            cols[k] = j
            if count < max_matches:
                count += 1
    n = 1
    while n * 2 <= count:
        n *= 2
    return n


@numba.njit(cache=True)
def _match_all(img, ref_rows, ref_cols, block, half, max_matches, thr):
    nref = ref_rows.shape[0] * ref_cols.shape[0]
    rows = np.zeros((nref, max_matches), dtype=np.int32)
    cols = np.zeros((nref, max_matches), dtype=np.int32)
    counts = np.zeros(nref, dtype=np.int32)
    dists = np.empty(max_matches)
    rbuf = np.empty(max_matches, dtype=np.int32)
    cbuf = np.empty(max_matches, dtype=np.int32)
    g = 0
    for r in ref_rows:
        for c in ref_cols:
            n = _match_one(img, r, c, block, half, max_matches, thr, rbuf, cbuf, dists)
            for k in range(n):
                rows[g, k] = rbuf[k]
                cols[g, k] = cbuf[k]
            counts[g] = n
            g += 1
    return rows, cols, counts


@numba.njit(cache=True)
def _dct_table(chan, D):
    """2D DCT of the block at every valid origin: table[r, c] = D X D^T."""
    B = D.shape[0]
    H, W = chan.shape
    Hb = H - B + 1
    Wb = W - B + 1
    table = np.empty((Hb, Wb, B, B))
    tmp = np.empty((B, B))
    for r in range(Hb):
        for c in range(Wb):
            for p in range(B):
                for j in range(B):
                    s = 0.0
                    for i in range(B):
                        s += D[p, i] * chan[r + i, c + j]
                    tmp[p, j] = s
            for p in range(B):
                for q in range(B):
                    s = 0.0
                    for j in range(B):
                        s += tmp[p, j] * D[q, j]
                    table[r, c, p, q] = s
    return table


@numba.njit(cache=True)
def _idct_block(coef, D, out):
    B = D.shape[0]
    tmp = np.empty((B, B))
    for i in range(B):
        for q in range(B):
            s = 0.0
            for p in range(B):
                s += D[p, i] * coef[p, q]
            tmp[i, q] = s
    for i in range(B):
        for j in range(B):
            s = 0.0
            for q in range(B):
                s += tmp[i, q] * D[q, j]
            out[i, j] = s


@numba.njit(cache=True)
def _hard_threshold_channel(table, rows, cols, counts, D, kaiser, sigma, lam, H, W):
    B = D.shape[0]
    num = np.zeros((H, W))
    den = np.zeros((H, W))
    maxn = rows.shape[1]
    g = np.empty((maxn, B * B))
    coef = np.empty((B, B))
    est = np.empty((B, B))
    thr = lam * sigma
    for ref in range(rows.shape[0]):
        n = counts[ref]
        for k in range(n):
            r = rows[ref, k]
            c = cols[ref, k]
            for p in range(B):
                for q in range(B):
                    g[k, p * B + q] = table[r, c, p, q]
        _haar_forward(g, n)
        kept = 1  # the DC coefficient is never thresholded
        for k in range(n):
            for m in range(B * B):
                if k == 0 and m == 0:
                    continue
                if abs(g[k, m]) > thr:
                    kept += 1
                else:
                    g[k, m] = 0.0
        _haar_inverse(g, n)
        if sigma > 0.0:
            wgt = 1.0 / (sigma * sigma * kept)
        else:
            wgt = 1.0 / kept
        for k in range(n):
            for p in range(B):
                for q in range(B):
                    coef[p, q] = g[k, p * B + q]
            _idct_block(coef, D, est)
            r = rows[ref, k]
            c = cols[ref, k]
            for i in range(B):
                for j in range(B):
                    w = wgt * kaiser[i, j]
                    num[r + i, c + j] += w * est[i, j]
                    den[r + i, c + j] += w
    return num, den


@numba.njit(cache=True)
def _wiener_channel(table_noisy, table_basic, rows, cols, counts, D, kaiser, sigma, H, W):
    B = D.shape[0]
    num = np.zeros((H, W))
    den = np.zeros((H, W))
    maxn = rows.shape[1]
    gy = np.empty((maxn, B * B))
    gb = np.empty((maxn, B * B))
    coef = np.empty((B, B))
    est = np.empty((B, B))
    s2 = sigma * sigma
    for ref in range(rows.shape[0]):
        n = counts[ref]
        for k in range(n):
            r = rows[ref, k]
            c = cols[ref, k]
            for p in range(B):
                for q in range(B):
                    gy[k, p * B + q] = table_noisy[r, c, p, q]
                    gb[k, p * B + q] = table_basic[r, c, p, q]
        _haar_forward(gy, n)
        _haar_forward(gb, n)
        wsq = 1.0  # DC gain is fixed at 1
        for k in range(n):
            for m in range(B * B):
                if k == 0 and m == 0:
                    continue
                b2 = gb[k, m] * gb[k, m]
                if b2 + s2 > 0.0:
                    w = b2 / (b2 + s2)
                else:
                    w = 1.0
                gy[k, m] *= w
                wsq += w * w
        _haar_inverse(gy, n)
        if s2 > 0.0:
            wgt = 1.0 / (s2 * wsq)
        else:
            wgt = 1.0 / wsq
        for k in range(n):
            for p in range(B):
                for q in range(B):
                    coef[p, q] = gy[k, p * B + q]
            _idct_block(coef, D, est)
            r = rows[ref, k]
            c = cols[ref, k]
            for i in range(B):
                for j in range(B):
                    w = wgt * kaiser[i, j]
                    num[r + i, c + j] += w * est[i, j]
                    den[r + i, c + j] += w
    return num, den


# ----------------------------------------------------------------------------
# python surface


def haar_matrix(n: int) -> np.ndarray:
    """Dense orthonormal Haar matrix matching the fast transform (rows = basis)."""
    eye = np.eye(n)
    cols = []
    for i in range(n):
        g = eye[:, i:i + 1].copy()
        _haar_forward(g, n)
        cols.append(g[:, 0])
    return np.stack(cols, axis=1)


def _channel(img) -> np.ndarray:
    if isinstance(img, ImageF32):
        if img.channels != 1:
            raise ValueError("block matching runs on a single channel")
        return img.data[0].astype(np.float64)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("block matching runs on a single channel")
    return arr


def block_match(ref_img, origin, prof: Bm3dStage) -> list:
    """Origins of the best-matching blocks for the block at ``origin``.

    Sorted by mean squared block difference; the group is truncated to the
    largest power of two among candidates within ``match_threshold``.
    """
    img = _channel(ref_img)
    r, c = origin
    H, W = img.shape
    if not (0 <= r <= H - prof.block and 0 <= c <= W - prof.block):
        raise ValueError(f"origin {origin} is not a valid block position")
    m = prof.max_matches
    rows = np.zeros(m, dtype=np.int32)
    cols = np.zeros(m, dtype=np.int32)
    dists = np.zeros(m)
    n = _match_one(img, int(r), int(c), prof.block, prof.search // 2, m,
                   float(prof.match_threshold), rows, cols, dists)
    return [(int(rows[k]), int(cols[k])) for k in range(n)]


def build_group(img, coords, block: int) -> PatchGroup:
    arr = _channel(img)
    stack = np.stack([arr[r:r + block, c:c + block] for r, c in coords])
    return PatchGroup(list(coords), stack)


def _grid(start: int, length: int, block: int, step: int) -> np.ndarray:
    last = start + length - block
    pos = list(range(start, last + 1, step))
    if pos[-1] != last:
        pos.append(last)
    return np.asarray(pos, dtype=np.int64)


def _prepare(data: np.ndarray, stages) -> tuple[np.ndarray, int]:
    _, H, W = data.shape
    block = max(s.block for s in stages)
    if H < block or W < block:
        raise ValueError(f"image {H}x{W} smaller than the {block}x{block} block")
    pad = min(max(s.search // 2 for s in stages), H - 1, W - 1)
    padded = np.pad(data.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    return padded, pad


def _channel_sigmas(sigma: float, nch: int, channel_scale) -> np.ndarray:
    if channel_scale is None:
        channel_scale = np.ones(nch)
    scale = np.asarray(channel_scale, dtype=np.float64)
    if scale.shape != (nch,):
        raise ValueError("channel_scale must have one entry per channel")
    return sigma * scale


def _stage1_padded(padded, pad, H, W, sigma_ch, prof: Bm3dProfile):
    st = prof.stage1
    D = dct_matrix(st.block)
    kaiser = kaiser_window(st.block, prof.kaiser_beta)
    rows, cols, counts = _match_all(
        padded[0], _grid(pad, H, st.block, st.step), _grid(pad, W, st.block, st.step),
        st.block, st.search // 2, st.max_matches, float(st.match_threshold),
    )
    out = np.empty_like(padded)
    Hp, Wp = padded.shape[1:]
    for ch in range(padded.shape[0]):
        table = _dct_table(padded[ch], D)
        num, den = _hard_threshold_channel(table, rows, cols, counts, D, kaiser,
                                           float(sigma_ch[ch]), float(prof.lambda3d), Hp, Wp)
        out[ch] = _normalize(num, den, padded[ch])
    return out


def _stage2_padded(padded, basic, pad, H, W, sigma_ch, prof: Bm3dProfile):
    st = prof.stage2
    D = dct_matrix(st.block)
    kaiser = kaiser_window(st.block, prof.kaiser_beta)
    rows, cols, counts = _match_all(
        basic[0], _grid(pad, H, st.block, st.step), _grid(pad, W, st.block, st.step),
        st.block, st.search // 2, st.max_matches, float(st.match_threshold),
    )
    out = np.empty_like(padded)
    Hp, Wp = padded.shape[1:]
    for ch in range(padded.shape[0]):
        tn = _dct_table(padded[ch], D)
        tb = _dct_table(basic[ch], D)
        num, den = _wiener_channel(tn, tb, rows, cols, counts, D, kaiser,
                                   float(sigma_ch[ch]), Hp, Wp)
        del tn, tb
        out[ch] = _normalize(num, den, padded[ch])
    return out


def _normalize(num, den, fallback):
    # pixels of the pad margin that no block reached keep their input value
    out = fallback.copy()
    mask = den > 0
    out[mask] = num[mask] / den[mask]
    return out


def _crop(arr, pad, H, W):
    return arr[:, pad:pad + H, pad:pad + W]


def stage1_hard(y: ImageF32, sigma, prof: Bm3dProfile | None = None,
                channel_scale=None) -> ImageF32:
    """Basic estimate by collaborative hard thresholding.

    ``channel_scale`` multiplies ``sigma`` per channel (the opponent transform
    changes the noise level of each channel). Matching uses channel 0.
    """
    s = _as_sigma(sigma)
    prof = prof or Bm3dProfile.for_sigma(s * 255)
    padded, pad = _prepare(y.data, [prof.stage1])
    sig = _channel_sigmas(s, y.channels, channel_scale)
    out = _stage1_padded(padded, pad, y.height, y.width, sig, prof)
    return ImageF32(_crop(out, pad, y.height, y.width).astype(np.float32))


def stage2_wiener(y: ImageF32, basic: ImageF32, sigma, prof: Bm3dProfile | None = None,
                  channel_scale=None) -> ImageF32:
    """Final estimate by empirical Wiener shrinkage guided by ``basic``."""
    if basic.shape != y.shape:
        raise ValueError("basic estimate and noisy image differ in shape")
    s = _as_sigma(sigma)
    prof = prof or Bm3dProfile.for_sigma(s * 255)
    padded, pad = _prepare(y.data, [prof.stage2])
    pb = np.pad(basic.data.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    sig = _channel_sigmas(s, y.channels, channel_scale)
    out = _stage2_padded(padded, pb, pad, y.height, y.width, sig, prof)
    return ImageF32(_crop(out, pad, y.height, y.width).astype(np.float32))


def bm3d_denoise(y: ImageF32, sigma, prof: Bm3dProfile | None = None) -> ImageF32:
    """Colour BM3D: opponent transform, both stages, inverse transform. Not clamped.

    Single-channel input skips the colour transform.
    """
    s = _as_sigma(sigma)
    prof = prof or Bm3dProfile.for_sigma(s * 255)
    if s == 0:
        return ImageF32(y.data.copy())
    if y.channels == 3:
        data = np.tensordot(OPPONENT, y.data.astype(np.float64), axes=1)
        scale = OPPONENT_ROW_NORMS
    else:
        data = y.data.astype(np.float64)
        scale = np.ones(1)
    padded, pad = _prepare(data, [prof.stage1, prof.stage2])
    sig = s * scale
    basic = _stage1_padded(padded, pad, y.height, y.width, sig, prof)
    basic = np.pad(_crop(basic, pad, y.height, y.width), ((0, 0), (pad, pad), (pad, pad)),
                   mode="reflect")
    final = _stage2_padded(padded, basic, pad, y.height, y.width, sig, prof)
    out = _crop(final, pad, y.height, y.width)
    if y.channels == 3:
        out = np.tensordot(OPPONENT_INV, out, axes=1)
    return ImageF32(out.astype(np.float32))
