"""Sign-adaptive decoding of feature stacks into per-layer saliency maps.

Each channel is min-max rescaled, summarized by its mean and above-threshold
area, and voted foreground (+1), background (-1), or ignored (0). The weighted
channel sum passes through ReLU and is normalized to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imagery


@dataclass(frozen=True)
class DecoderParams:
    area_low: float = 0.1
    area_high: float = 0.2

    def __post_init__(self):
        if not (0.0 <= self.area_low <= self.area_high <= 1.0):
            raise ValueError("need 0 <= area_low <= area_high <= 1")


@dataclass(frozen=True)
class ChannelStats:
    means: np.ndarray
    global_threshold: float
    variance: float
    areas: np.ndarray


def rescale_channels(features: np.ndarray) -> np.ndarray:
    """Min-max rescale each channel to [0, 1]; constant channels become zero."""
    feats = imagery.as_channels(features)
    lo = feats.min(axis=(0, 1))
    hi = feats.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = (feats - lo) / safe
    scaled[:, :, span <= 0] = 0.0
    return scaled


def channel_stats(features: np.ndarray) -> ChannelStats:
    feats = imagery.as_channels(features)
    if feats.shape[2] == 0:
        raise ValueError("feature map has zero channels")
    scaled = rescale_channels(feats)
    means = scaled.mean(axis=(0, 1))
    t, degenerate = imagery.otsu_1d(means)
    if degenerate:
        t = float(means.mean())
    variance = float(means.var())
    areas = np.empty(feats.shape[2], dtype=np.float64)
    for i in range(feats.shape[2]):
        ch = scaled[:, :, i]
        thr, _ = imagery.otsu_1d(ch)
        areas[i] = float((ch > thr).mean())
    return ChannelStats(means, float(t), variance, areas)


def channel_weights(stats: ChannelStats, params: DecoderParams) -> np.ndarray:
    """Per-channel vote in {-1, 0, +1}: low-mean small-area channels are
    foreground, high-mean large-area channels are background."""
    fg = (stats.means <= stats.global_threshold - stats.variance) & (
        stats.areas < params.area_low
    )
    bg = (stats.means >= stats.global_threshold + stats.variance) & (
        stats.areas > params.area_high
    )
    return np.where(fg, 1.0, np.where(bg, -1.0, 0.0))


def decode_layer(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of rescaled channels, ReLU, min-max normalized to [0, 1]."""
    feats = imagery.as_channels(features)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (feats.shape[2],):
        raise ValueError(
            f"weights length {weights.shape} does not match {feats.shape[2]} channels"
        )
    sal = np.maximum(rescale_channels(feats) @ weights, 0.0)
    peak = sal.max()
    return sal / peak if peak > 0 else sal


def decode_stack(
    features_per_layer: list[np.ndarray],
    params: DecoderParams,
    target_h: int,
    target_w: int,
) -> list[np.ndarray]:
    """Per-layer saliency maps, all upsampled to the target size."""
    if not features_per_layer:
        raise ValueError("empty feature stack")
    maps = []
    for feats in features_per_layer:
        weights = channel_weights(channel_stats(feats), params)
        sal = decode_layer(feats, weights)
        maps.append(imagery.upsample_bilinear(sal, target_h, target_w))
    return maps


def save_stack(out_dir, image_id: str, maps: list[np.ndarray], params: DecoderParams) -> None:
    """Persist per-layer saliency PNGs plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for l, sal in enumerate(maps, start=1):
        name = f"{image_id}_layer{l}.png"
        imagery.write_image(out_dir / name, sal)
        names.append(name)
    manifest = {
        "image_id": image_id,
        "layers": names,
        "decoder_params": {"area_low": params.area_low, "area_high": params.area_high},
    }
    (out_dir / f"{image_id}_stack.json").write_text(json.dumps(manifest))
