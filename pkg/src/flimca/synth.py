"""Seeded synthetic datasets for desk-scale runs and acceptance checks.

Two families: "parasite-like" RGB images (textured background, dark debris,
bright elliptical objects) and "brain-like" grayscale images (elliptical
domain mask, smooth tissue, one hyperintense blob with a hypointense core).
Ground truths and domain masks are emitted alongside the images.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imagery
from .flim import Marker


def _smooth_noise(rng: np.random.Generator, h: int, w: int, grid: int = 9, amp: float = 1.0) -> np.ndarray:
    coarse = rng.uniform(-amp, amp, size=(grid, grid))
    return imagery.upsample_bilinear(coarse, h, w)


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float, angle: float = 0.0) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - cy
    dx = xs - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def parasite_image(rng: np.random.Generator, size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """RGB image with 1-3 bright elliptical objects; returns (image, gt mask)."""
    h = w = size
    base = np.array([0.42, 0.45, 0.38])
    img = np.empty((h, w, 3), dtype=np.float64)
    for c in range(3):
        img[:, :, c] = base[c] + 0.05 * _smooth_noise(rng, h, w) + rng.normal(0.0, 0.015, (h, w))
    # dark debris distractors
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(10, h - 10), rng.uniform(10, w - 10)
        ry, rx = rng.uniform(4, 10), rng.uniform(4, 10)
        blob = _ellipse_mask(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))
        img[blob] *= rng.uniform(0.35, 0.55)
    # bright elliptical objects with area in [1000, 9000]
    gt = np.zeros((h, w), dtype=bool)
    n_obj = int(rng.integers(1, 4))
    color = np.array([0.88, 0.78, 0.52])
    placed = 0
    # per-object areas scale with the raster; at size 256 each object lands
    # in [1000, 4800/n] px, keeping the stack's total object coverage small
    # the way real eggs are small against a full micrograph
    area_lo = 1000.0 / (256.0 * 256.0) * size * size
    area_hi = (4800.0 / n_obj) / (256.0 * 256.0) * size * size
    for _ in range(40):
        if placed >= n_obj:
            break
        area = rng.uniform(area_lo, area_hi)
        r0 = np.sqrt(area / np.pi)
        rx = r0 * np.exp(rng.uniform(-0.35, 0.35))
        ry = area / (np.pi * rx)
        margin = max(rx, ry) + 4
        if 2 * margin >= min(h, w):
            continue
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        obj = _ellipse_mask(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))
        if (obj & gt).any():
            continue
        shade = 1.0 - 0.15 * np.clip(_smooth_noise(rng, h, w), -1, 1)
        # fine internal speckle gives objects a texture of their own, so
        # first-layer filters can respond across interiors, not just edges;
        # varying its contrast per object spreads channel statistics apart
        amp = rng.uniform(0.15, 0.45)
        shade = shade + amp * np.clip(_smooth_noise(rng, h, w, grid=40), -1, 1)
        for c in range(3):
            img[:, :, c] = np.where(obj, color[c] * shade + rng.normal(0, 0.01, (h, w)), img[:, :, c])
        gt |= obj
        placed += 1
    return np.clip(img, 0.0, 1.0), gt


def brain_image(rng: np.random.Generator, size: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grayscale image; returns (image, gt mask, brain mask)."""
    h = w = size
    brain = _ellipse_mask(h, w, h / 2, w / 2, h * 0.42, w * 0.36, rng.uniform(-0.2, 0.2))
    img = np.zeros((h, w), dtype=np.float64)
    tissue = 0.32 + 0.05 * _smooth_noise(rng, h, w) + rng.normal(0.0, 0.01, (h, w))
    img[brain] = tissue[brain]
    # hyperintense blob with an attached hypointense core, inside the brain
    for _ in range(50):
        cy = rng.uniform(h * 0.3, h * 0.7)
        cx = rng.uniform(w * 0.3, w * 0.7)
        ry, rx = rng.uniform(18, 34), rng.uniform(18, 34)
        blob = _ellipse_mask(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))
        if blob.sum() > 0 and (blob & ~brain).sum() == 0:
            break
    core = _ellipse_mask(h, w, cy + rng.uniform(-4, 4), cx + rng.uniform(-4, 4),
                         ry * 0.4, rx * 0.4, rng.uniform(0, np.pi)) & blob
    img[blob] = 0.82 + 0.04 * rng.normal(0.0, 1.0, int(blob.sum()))
    img[core] = 0.12 + 0.02 * rng.normal(0.0, 1.0, int(core.sum()))
    gt = blob
    return np.clip(img, 0.0, 1.0), gt, brain


def oracle_markers(image_id: str, img: np.ndarray, gt: np.ndarray,
                   seed: int = 0, n_bg: int = 4) -> list[Marker]:
    """Scripted stand-in for the human design phase: one foreground marker per
    object interior plus background markers away from the objects."""
    rng = np.random.default_rng(seed)
    h, w = gt.shape
    markers: list[Marker] = []
    labels, n = ndimage.label(gt)
    for comp in range(1, n + 1):
        rows, cols = np.nonzero(labels == comp)
        cy, cx = int(rows.mean()), int(cols.mean())
        if not gt[cy, cx]:
            # centroid fell outside a concave component: use any interior pixel
            mid = len(rows) // 2
            cy, cx = int(rows[mid]), int(cols[mid])
        markers.append(Marker(image_id, cx, cy, 2, "fg"))
    far = imagery.dilate(gt.astype(np.float64), 15) < 0.5
    bg_rows, bg_cols = np.nonzero(far)
    if bg_rows.size:
        picks = rng.choice(bg_rows.size, size=min(n_bg, bg_rows.size), replace=False)
        for i in sorted(int(j) for j in picks):
            markers.append(Marker(image_id, int(bg_cols[i]), int(bg_rows[i]), 3, "bg"))
    return markers


def generate_dataset(out_dir, count: int, seed: int, kind: str = "parasite",
                     size: int = 256, train_count: int = 3) -> dict:
    """Write images, ground truths, masks, and a manifest; returns the manifest."""
    if kind not in ("parasite", "brain"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(exist_ok=True)
    if kind == "brain":
        (out_dir / "masks").mkdir(exist_ok=True)
    entries = []
    ids = []
    for i in range(count):
        rng = np.random.default_rng(seed + i)
        image_id = f"{kind}_{i:04d}"
        ids.append(image_id)
        entry = {
            "image_id": image_id,
            "image_path": f"images/{image_id}.png",
            "gt_path": f"gt/{image_id}.png",
        }
        if kind == "parasite":
            img, gt = parasite_image(rng, size)
        else:
            img, gt, brain = brain_image(rng, size)
            imagery.write_mask(out_dir / "masks" / f"{image_id}.png", brain)
            entry["mask_path"] = f"masks/{image_id}.png"
        imagery.write_image(out_dir / "images" / f"{image_id}.png", img)
        imagery.write_mask(out_dir / "gt" / f"{image_id}.png", gt)
        entries.append(entry)
    train = ids[:train_count]
    rest = ids[train_count:]
    half = len(rest) // 2
    manifest = {
        "root": str(out_dir),
        "entries": entries,
        "splits": {
            "train": train,
            "validation": rest[:half],
            "test": rest[half:],
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
