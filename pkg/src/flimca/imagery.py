"""Raster primitives shared by the whole pipeline.

Images are plain numpy float64 arrays, either ``(h, w)`` for single-channel
rasters or ``(h, w, c)`` for multi-channel ones, with samples normally in
``[0, 1]``. Binary masks are boolean ``(h, w)`` arrays. All functions here are
pure; nothing mutates its inputs.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

OTSU_BINS = 256


def as_channels(img: np.ndarray) -> np.ndarray:
    """View an image as (h, w, c), adding a channel axis when missing."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise ValueError(f"expected 2D or 3D raster, got shape {img.shape}")


def extract_patch(img: np.ndarray, row: int, col: int, k: int) -> np.ndarray:
    """Vectorize the k x k x m neighborhood of (row, col) in (row, col, channel) order.

    Out-of-bounds samples are zero.
    """
    if k <= 0 or k % 2 == 0:
        raise ValueError(f"patch side must be odd and positive, got {k}")
    img = as_channels(img)
    h, w, m = img.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"pixel ({row}, {col}) outside {h}x{w} domain")
    r = k // 2
    patch = np.zeros((k, k, m), dtype=np.float64)
    r0, r1 = max(0, row - r), min(h, row + r + 1)
    c0, c1 = max(0, col - r), min(w, col + r + 1)
    patch[r0 - (row - r):r1 - (row - r), c0 - (col - r):c1 - (col - r)] = img[r0:r1, c0:c1]
    return patch.reshape(-1)


# sRGB -> XYZ (D65) matrix, IEC 61966-2-1
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an sRGB image in [0,1] to CIE LAB rescaled to [0,1] per channel.

    Rescaling: L/100, (a+128)/255, (b+128)/255, so LAB distances live on a
    bounded range.
    """
    img = as_channels(img)
    if img.shape[2] != 3:
        raise ValueError(f"rgb_to_lab needs 3 channels, got {img.shape[2]}")
    rgb = np.clip(img, 0.0, 1.0)
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = linear @ _RGB2XYZ.T
    t = xyz / _D65
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    lab = np.stack(
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1
    )
    lab[..., 0] /= 100.0
    lab[..., 1] = (lab[..., 1] + 128.0) / 255.0
    lab[..., 2] = (lab[..., 2] + 128.0) / 255.0
    return lab


def disk_footprint(radius: float) -> np.ndarray:
    """Boolean disk: offsets with Euclidean center distance <= radius."""
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return dy * dy + dx * dx <= radius * radius


def dilate(img: np.ndarray, radius: float) -> np.ndarray:
    """Grayscale dilation with a Euclidean disk structuring element."""
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("dilate expects a single-channel raster")
    if radius < 1:
        return img.copy()
    return ndimage.grey_dilation(
        img, footprint=disk_footprint(radius), mode="constant", cval=-np.inf
    )


def upsample_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling to (out_h, out_w)."""
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    arr = as_channels(arr)
    h, w, _ = arr.shape
    if out_h < h or out_w < w:
        raise ValueError(f"target {out_h}x{out_w} smaller than source {h}x{w}")
    if (out_h, out_w) == (h, w):
        out = arr.copy()
    else:
        ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
        xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = (ys - y0)[:, None, None]
        wx = (xs - x0)[None, :, None]
        top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
        bottom = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
        out = top * (1 - wy) + bottom * wy
    return out[:, :, 0] if squeeze else out


class OtsuResult(NamedTuple):
    threshold: float
    degenerate: bool


def otsu_1d(values: np.ndarray) -> OtsuResult:
    """Otsu threshold over a flat value set using 256 bins on [min, max].

    Returns the bin boundary maximizing between-class variance, ties broken
    toward the lower threshold. Constant input is degenerate and returns the
    constant itself.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("otsu over an empty value set")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return OtsuResult(lo, True)
    hist, edges = np.histogram(values, bins=OTSU_BINS, range=(lo, hi))
    hist = hist.astype(np.float64)
    total = hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * centers)
    mu_total = sum0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (mu_total - sum0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    # argmax takes the first (lowest) maximizer
    t = int(np.argmax(between[:-1]))
    return OtsuResult(float(edges[t + 1]), False)


def otsu_threshold(values: np.ndarray, domain: np.ndarray | None = None) -> OtsuResult:
    """Otsu threshold of a single-channel image restricted to a boolean domain."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("otsu_threshold expects a single-channel raster")
    if domain is not None:
        domain = np.asarray(domain, dtype=bool)
        if domain.shape != values.shape:
            raise ValueError("domain shape mismatch")
        values = values[domain]
        if values.size == 0:
            raise ValueError("empty domain")
    return otsu_1d(values)


_EIGHT_CONN = np.ones((3, 3), dtype=bool)


def connected_components(
    mask: np.ndarray, area_min: int, area_max: int
) -> np.ndarray:
    """Keep only 8-connected components whose area lies in [area_min, area_max]."""
    if area_min > area_max:
        raise ValueError(f"area_min {area_min} > area_max {area_max}")
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_EIGHT_CONN)
    if n == 0:
        return np.zeros_like(mask)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = (areas >= area_min) & (areas <= area_max)
    keep[0] = False
    return keep[labels]


def read_image(path) -> np.ndarray:
    """Read an 8/16-bit PNG or PGM/PPM and normalize samples to [0,1]."""
    with PILImage.open(path) as pil:
        if pil.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(pil, dtype=np.float64) / 65535.0
        elif pil.mode in ("L", "RGB"):
            arr = np.asarray(pil, dtype=np.float64) / 255.0
        elif pil.mode == "RGBA":
            arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
        else:
            arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_image(path, img: np.ndarray, bit_depth: int = 8) -> None:
    """Write an image quantized from [0,1]; saliencies use round(v * max)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 16:
        if arr.ndim != 2:
            raise ValueError("16-bit output supports single-channel rasters only")
        data = np.round(arr * 65535.0).astype("<u2")
        pil = PILImage.new("I;16", (data.shape[1], data.shape[0]))
        pil.frombytes(data.tobytes())
        pil.save(path)
        return
    data = np.round(arr * 255.0).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as an 8-bit {0, 255} PNG."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def read_mask(path) -> np.ndarray:
    arr = read_image(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr >= 0.5
