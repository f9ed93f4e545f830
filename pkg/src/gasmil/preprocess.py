"""Tissue detection and tiling on plain RGB rasters.

The low-magnification view of a slide is an ``(H, W, 3)`` uint8 array.  Hue
and saturation are thresholded (Otsu by default), the two masks are ANDed and
dilated, and the mask is mapped onto the full-resolution grid through an
integer ``scale_factor`` to pick ``tile_size`` tiles.

Histograms have 256 bins over [0, 1]; a value ``v`` lands in bin
``min(floor(256 v), 255)``.  A threshold bin ``t`` keeps pixels whose bin is
strictly greater than ``t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError

TILE_SIZE = 224
SCALE_FACTOR = 16
COVERAGE_THRESHOLD = 0.5
FIXED_THRESHOLD = 0.6


class DegenerateHistogramError(ParameterError):
    pass


# PPM (binary P6) codec


def _ppm_tokens(data):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos = 0
    for _ in range(4):
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        yield data[start:pos], start
    yield None, pos


def decode_ppm(data):
    data = bytes(data)
    tokens = list(_ppm_tokens(data))
    (magic, _), (w, w_at), (h, h_at), (maxval, m_at), (_, end) = tokens
    if magic != b"P6":
        raise FormatError(f"not a binary PPM (magic {magic!r})", 0)
    try:
        width, height, mv = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("non-numeric PPM header field", w_at) from None
    if width < 1 or height < 1:
        raise FormatError(f"invalid PPM size {width}x{height}", w_at)
    if mv != 255:
        raise FormatError(f"only maxval 255 is supported, got {mv}", m_at)
    start = end + 1
    need = width * height * 3
    if len(data) < start + need:
        raise FormatError(f"PPM pixel data truncated: need {need} bytes", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(height, width, 3).copy()


def encode_ppm(image):
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + image.tobytes()


def read_ppm(path):
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, image):
    Path(path).write_bytes(encode_ppm(image))


# colour and thresholds


def rgb_to_hsv(image):
    """Hexcone HSV planes in [0, 1]; hue is 0 and saturation 0 for grey pixels."""
    rgb = np.asarray(image).astype(np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) image, got {rgb.shape}")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    chroma = mx - mn
    v = mx / 255.0
    s = np.divide(chroma, mx, out=np.zeros_like(mx), where=mx > 0)
    safe = np.where(chroma > 0, chroma, 1.0)
    h = np.where(
        mx == r,
        np.mod((g - b) / safe, 6.0),
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(chroma > 0, h / 6.0, 0.0)
    h = np.where(h >= 1.0, 0.0, h)
    return h, s, v


def histogram256(plane):
    return np.bincount(histogram_bins(plane).reshape(-1), minlength=256)


def otsu_threshold(hist):
    """Bin ``t`` maximising the between-class variance of bins ``<= t`` vs ``> t``.

    Exact: with ``W0, S0`` the count and first moment at or below ``t`` and
    ``W, S`` the totals, the between-class variance is proportional to
    ``(S0 W - S W0)^2 / (W0 (W - W0))``, compared here in integer arithmetic.
    Ties go to the lowest bin.
    """
    hist = [int(h) for h in np.asarray(hist).reshape(-1)]
    if any(h < 0 for h in hist):
        raise ParameterError("histogram counts must be non-negative")
    total = sum(hist)
    if total < 1:
        raise ParameterError("histogram is empty")
    moment = sum(i * h for i, h in enumerate(hist))
    best_t, best_num, best_den = None, 0, 1
    w0 = s0 = 0
    for t in range(len(hist) - 1):
        w0 += hist[t]
        s0 += t * hist[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (s0 * total - moment * w0) ** 2
        den = w0 * w1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None:
        raise DegenerateHistogramError("all histogram mass lies in a single bin; no threshold separates it")
    return best_t


@dataclass
class TissueMask:
    bits: np.ndarray
    scale_factor: int = SCALE_FACTOR
    full_size: tuple = None
    thresholds: tuple = ()

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2 or min(self.bits.shape) < 1:
            raise ParameterError(f"mask must be a non-empty 2-D array, got {self.bits.shape}")
        if self.scale_factor < 1:
            raise ParameterError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if self.full_size is None:
            h, w = self.bits.shape
            self.full_size = (w * self.scale_factor, h * self.scale_factor)

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]


def tissue_mask(
    image,
    dilation_radius=1,
    method="otsu",
    fixed_threshold=FIXED_THRESHOLD,
    scale_factor=SCALE_FACTOR,
    full_size=None,
):
    """Pixels whose hue and saturation both exceed their thresholds, then dilated.

    ``method="otsu"`` computes per-channel Otsu thresholds; ``"fixed"`` uses
    ``fixed_threshold`` for both channels.  An image with no chromatic pixels
    at all (every saturation in bin 0) yields an empty mask; any other
    single-bin channel raises :class:`DegenerateHistogramError`.
    ``TissueMask.thresholds`` reports the (hue, saturation) cut points on the
    [0, 1] scale.
    """
    if dilation_radius < 0:
        raise ParameterError(f"dilation radius must be >= 0, got {dilation_radius}")
    h, s, _ = rgb_to_hsv(image)
    if method == "otsu":
        h_bins, s_bins = histogram_bins(h), histogram_bins(s)
        if not s_bins.any():
            return TissueMask(np.zeros(s.shape, dtype=bool), scale_factor, full_size, (None, None))
        t_h = otsu_threshold(np.bincount(h_bins.reshape(-1), minlength=256))
        t_s = otsu_threshold(np.bincount(s_bins.reshape(-1), minlength=256))
        bits = (h_bins > t_h) & (s_bins > t_s)
        thresholds = ((t_h + 1) / 256.0, (t_s + 1) / 256.0)
    elif method == "fixed":
        bits = (h > fixed_threshold) & (s > fixed_threshold)
        thresholds = (fixed_threshold, fixed_threshold)
    else:
        raise ParameterError(f"threshold method must be 'otsu' or 'fixed', got {method!r}")
    if dilation_radius > 0 and bits.any():
        size = 2 * dilation_radius + 1
        bits = ndimage.binary_dilation(bits, structure=np.ones((size, size), dtype=bool))
    return TissueMask(bits, scale_factor, full_size, thresholds)


def histogram_bins(plane):
    return np.minimum((np.asarray(plane) * 256.0).astype(np.int64), 255)


# tiling


@dataclass
class TileGrid:
    tile_size: int
    coords: list = field(default_factory=list)
    coverage_threshold: float = COVERAGE_THRESHOLD
    coverages: list = field(default_factory=list)

    def to_json(self):
        return {
            "tile_size": self.tile_size,
            "coverage_threshold": self.coverage_threshold,
            "tiles": [
                {"x": int(x), "y": int(y), "coverage": float(c)} for (x, y), c in zip(self.coords, self.coverages)
            ],
        }


def _overlap(n_tiles, tile, n_cells, scale, limit):
    """``(n_tiles, n_cells)`` pixel overlap between tiles and upscaled mask cells."""
    t0 = np.arange(n_tiles)[:, None] * tile
    c0 = np.arange(n_cells)[None, :] * scale
    lo = np.maximum(t0, c0)
    hi = np.minimum(np.minimum(t0 + tile, c0 + scale), limit)
    return np.maximum(hi - lo, 0).astype(np.int64)


def tile_coords(mask, tile_size=TILE_SIZE, coverage_threshold=COVERAGE_THRESHOLD):
    """Non-overlapping full-resolution tiles whose mask coverage reaches the threshold.

    Only tiles lying entirely inside the full-resolution image are considered;
    coordinates are top-left ``(x, y)`` corners in row-major order.
    """
    if tile_size < 1:
        raise ParameterError(f"tile_size must be >= 1, got {tile_size}")
    full_w, full_h = mask.full_size
    nx, ny = full_w // tile_size, full_h // tile_size
    grid = TileGrid(tile_size, [], coverage_threshold, [])
    if nx == 0 or ny == 0:
        return grid
    wy = _overlap(ny, tile_size, mask.height, mask.scale_factor, full_h)
    wx = _overlap(nx, tile_size, mask.width, mask.scale_factor, full_w)
    covered = wy @ mask.bits.astype(np.int64) @ wx.T
    area = tile_size * tile_size
    for ty in range(ny):
        for tx in range(nx):
            frac = covered[ty, tx] / area
            if covered[ty, tx] >= coverage_threshold * area:
                grid.coords.append((tx * tile_size, ty * tile_size))
                grid.coverages.append(frac)
    return grid


def downsample(image, factor):
    """Block-mean reduction by an integer factor (partial edge blocks included)."""
    image = np.asarray(image)
    if factor == 1:
        return image.copy()
    h, w, _ = image.shape
    hh, ww = -(-h // factor), -(-w // factor)
    padded = np.zeros((hh * factor, ww * factor, 3))
    weight = np.zeros((hh * factor, ww * factor, 1))
    padded[:h, :w] = image
    weight[:h, :w] = 1.0
    sums = padded.reshape(hh, factor, ww, factor, 3).sum(axis=(1, 3))
    counts = weight.reshape(hh, factor, ww, factor, 1).sum(axis=(1, 3))
    return np.rint(sums / counts).astype(np.uint8)


def extract_tiles(image, grid, out_dir):
    """Write each tile as ``tile_<x>_<y>.ppm`` plus ``tiles.json``; returns the index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = grid.to_json()
    t = grid.tile_size
    for entry in index["tiles"]:
        x, y = entry["x"], entry["y"]
        name = f"tile_{x}_{y}.ppm"
        write_ppm(out_dir / name, image[y : y + t, x : x + t])
        entry["file"] = name
    (out_dir / "tiles.json").write_text(json.dumps(index, indent=1) + "\n")
    return index


def preprocess_image(
    image,
    out_dir,
    scale_factor=SCALE_FACTOR,
    tile_size=TILE_SIZE,
    coverage_threshold=COVERAGE_THRESHOLD,
    dilation_radius=1,
    method="otsu",
    fixed_threshold=FIXED_THRESHOLD,
):
    """Full pipeline on a full-resolution raster: downsample, mask, tile, crop."""
    image = np.asarray(image, dtype=np.uint8)
    low = downsample(image, scale_factor)
    mask = tissue_mask(
        low,
        dilation_radius,
        method,
        fixed_threshold,
        scale_factor,
        full_size=(image.shape[1], image.shape[0]),
    )
    grid = tile_coords(mask, tile_size, coverage_threshold)
    index = extract_tiles(image, grid, out_dir)
    index["mask_shape"] = list(mask.bits.shape)
    index["thresholds"] = list(mask.thresholds)
    (Path(out_dir) / "tiles.json").write_text(json.dumps(index, indent=1) + "\n")
    return mask, grid
