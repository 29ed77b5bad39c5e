"""Marker-driven convolutional encoder.

Filter banks are estimated from user-placed disk markers: patches under each
marker are z-score normalized with statistics fit on the whole marked set,
clustered per marker with seeded k-means, and the unit-norm cluster centers
become convolution kernels. The layered forward pass is
normalize -> convolve -> activation -> pooling, all with zero padding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imagery
from .kmeans import kmeans

FG = "fg"
BG = "bg"

MODEL_MAGIC = b"FLIM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Marker:
    image_id: str
    x: int
    y: int
    radius: int
    label: str

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"marker radius must be >= 0, got {self.radius}")
        if self.label not in (FG, BG):
            raise ValueError(f"marker label must be fg or bg, got {self.label!r}")


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    stdev: np.ndarray
    epsilon: float

    @property
    def divisor(self) -> np.ndarray:
        return np.where(self.stdev < self.epsilon, self.epsilon, self.stdev)

    def apply(self, patches: np.ndarray) -> np.ndarray:
        return (patches - self.mean) / self.divisor


@dataclass(frozen=True)
class FilterBank:
    side: int
    in_channels: int
    kernels: np.ndarray  # (n, side*side*in_channels), unit-norm rows
    stats: NormalizationStats

    def __len__(self) -> int:
        return self.kernels.shape[0]


@dataclass(frozen=True)
class LayerSpec:
    kernel_side: int = 3
    activation: str = "relu"  # relu | none
    pool: str = "max"  # max | avg | none
    pool_side: int = 3
    pool_stride: int = 1
    filters_per_marker: int = 4
    max_filters: int = 200

    def __post_init__(self):
        if self.kernel_side % 2 == 0 or self.kernel_side <= 0:
            raise ValueError("kernel_side must be odd and positive")
        if self.pool_stride < 1:
            raise ValueError("pool_stride must be >= 1")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pool not in ("max", "avg", "none"):
            raise ValueError(f"unknown pool {self.pool!r}")


@dataclass
class EncoderModel:
    input_channels: int
    layers: list[tuple[LayerSpec, FilterBank]] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.layers)


def parse_markers(text: str) -> list[Marker]:
    """Parse the marker file format: `image_id x y radius label` per line."""
    markers = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"marker line {lineno}: expected 5 fields, got {len(parts)}")
        image_id, x, y, radius, label = parts
        markers.append(Marker(image_id, int(x), int(y), int(radius), label))
    return markers


def format_markers(markers: list[Marker]) -> str:
    lines = [f"{m.image_id} {m.x} {m.y} {m.radius} {m.label}" for m in markers]
    return "\n".join(lines) + ("\n" if lines else "")


def disk_pixels(x: int, y: int, radius: int, w: int, h: int) -> list[tuple[int, int]]:
    """(row, col) pixels within Euclidean distance <= radius of (x, y), row-major."""
    out = []
    r = int(radius)
    for row in range(max(0, y - r), min(h, y + r + 1)):
        for col in range(max(0, x - r), min(w, x + r + 1)):
            if (row - y) ** 2 + (col - x) ** 2 <= radius * radius:
                out.append((row, col))
    return out


def collect_marker_patches(
    images: dict[str, np.ndarray], markers: list[Marker], k: int
) -> list[np.ndarray]:
    """One patch per pixel inside each marker disk, in marker order."""
    patches = []
    for m in markers:
        if m.image_id not in images:
            raise ValueError(f"marker references unknown image {m.image_id!r}")
        img = imagery.as_channels(images[m.image_id])
        h, w, _ = img.shape
        if not (0 <= m.x < w and 0 <= m.y < h):
            raise ValueError(f"marker at ({m.x}, {m.y}) outside {w}x{h} image {m.image_id!r}")
        for row, col in disk_pixels(m.x, m.y, m.radius, w, h):
            patches.append(imagery.extract_patch(img, row, col, k))
    return patches


def fit_normalization(patches: list[np.ndarray], epsilon: float = 1e-8) -> NormalizationStats:
    """Per-dimension z-score statistics over the marked patch set."""
    if not patches:
        raise ValueError("cannot fit normalization on an empty patch set")
    mat = np.asarray(patches, dtype=np.float64)
    return NormalizationStats(mat.mean(axis=0), mat.std(axis=0), epsilon)


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1)
    keep = norms > 1e-12
    return mat[keep] / norms[keep, None]


def learn_filters(
    patches_by_marker: list[tuple[Marker, list[np.ndarray]]],
    stats: NormalizationStats,
    n_per_marker: int,
    seed: int,
    side: int,
    in_channels: int,
) -> FilterBank:
    """Per-marker k-means over normalized patches; centers become unit-norm kernels."""
    if not patches_by_marker:
        raise ValueError("no marker patches to learn filters from")
    kernels = []
    for i, (_, patches) in enumerate(patches_by_marker):
        if not patches:
            raise ValueError("a marker contributed zero patches")
        pts = stats.apply(np.asarray(patches, dtype=np.float64))
        distinct = np.unique(pts, axis=0)
        if distinct.shape[0] <= n_per_marker:
            centers = distinct
        else:
            centers = kmeans(pts, n_per_marker, seed=seed + i)
        kernels.append(_unit_rows(centers))
    bank = np.concatenate(kernels, axis=0)
    return FilterBank(side, in_channels, bank, stats)


def reduce_filters(bank: FilterBank, target: int, seed: int) -> FilterBank:
    """Shrink a bank to at most `target` kernels via k-means over the kernels."""
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    if len(bank) <= target:
        return bank
    centers = kmeans(bank.kernels, target, seed=seed)
    return replace(bank, kernels=_unit_rows(centers))


def _pool(img: np.ndarray, kind: str, side: int, stride: int) -> np.ndarray:
    if kind == "none":
        return img[::stride, ::stride] if stride > 1 else img
    h, w, m = img.shape
    r = side // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (side, side), axis=(0, 1))
    win = win[::stride, ::stride]
    if kind == "max":
        return win.max(axis=(-2, -1))
    return win.sum(axis=(-2, -1)) / (side * side)


def forward_layer(img: np.ndarray, spec: LayerSpec, bank: FilterBank) -> np.ndarray:
    """Normalized convolution with the bank, then activation and pooling."""
    img = imagery.as_channels(img)
    if img.shape[2] != bank.in_channels:
        raise ValueError(
            f"layer expects {bank.in_channels} channels, input has {img.shape[2]}"
        )
    h, w, m = img.shape
    k = bank.side
    r = k // 2
    out = np.empty((h, w, len(bank)), dtype=np.float64)
    kt = bank.kernels.T
    padded = np.pad(img, ((r, r), (r, r), (0, 0)))
    # process bands of rows so the patch matrix stays bounded for wide maps
    chunk = max(1, (1 << 22) // max(1, w * k * k * m))
    for start in range(0, h, chunk):
        stop = min(h, start + chunk)
        band = padded[start:stop + 2 * r]
        win = np.lib.stride_tricks.sliding_window_view(band, (k, k), axis=(0, 1))
        cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(
            (stop - start) * w, k * k * m
        )
        out[start:stop] = (bank.stats.apply(cols) @ kt).reshape(stop - start, w, len(bank))
    feat = out
    if spec.activation == "relu":
        feat = np.maximum(feat, 0.0)
    return _pool(feat, spec.pool, spec.pool_side, spec.pool_stride)


def forward_encoder(img: np.ndarray, model: EncoderModel) -> list[np.ndarray]:
    """Feature map after every layer, shallow to deep."""
    img = imagery.as_channels(img)
    if img.shape[2] != model.input_channels:
        raise ValueError(
            f"encoder expects {model.input_channels} channels, input has {img.shape[2]}"
        )
    outputs = []
    current = img
    for spec, bank in model.layers:
        current = forward_layer(current, spec, bank)
        outputs.append(current)
    return outputs


def project_markers(markers: list[Marker], cumulative_stride: int) -> list[Marker]:
    """Map markers into a feature domain downscaled by the cumulative stride."""
    if cumulative_stride < 1:
        raise ValueError("cumulative_stride must be >= 1")
    if cumulative_stride == 1:
        return list(markers)
    seen = set()
    out = []
    for m in markers:
        proj = Marker(
            m.image_id,
            m.x // cumulative_stride,
            m.y // cumulative_stride,
            m.radius // cumulative_stride,
            m.label,
        )
        key = (proj.image_id, proj.x, proj.y, proj.label)
        if key in seen:
            continue
        seen.add(key)
        out.append(proj)
    return out


def group_patches_by_marker(
    images: dict[str, np.ndarray], markers: list[Marker], k: int
) -> list[tuple[Marker, list[np.ndarray]]]:
    groups = []
    for m in markers:
        patches = collect_marker_patches(images, [m], k)
        groups.append((m, patches))
    return groups


def train_encoder(
    images: dict[str, np.ndarray],
    markers: list[Marker],
    specs: list[LayerSpec],
    input_channels: int,
    seed: int = 0,
) -> EncoderModel:
    """Layer-by-layer filter learning over the training images.

    Layer l > 1 learns from the layer l-1 feature maps with markers projected
    by the cumulative pooling stride.
    """
    if not markers:
        raise ValueError("cannot train an encoder with zero markers")
    model = EncoderModel(input_channels=input_channels)
    current = {iid: imagery.as_channels(img) for iid, img in images.items()}
    stride = 1
    for li, spec in enumerate(specs):
        projected = project_markers(markers, stride)
        projected = [m for m in projected if m.image_id in current]
        if not projected:
            raise ValueError("no markers left after projection")
        all_patches = collect_marker_patches(current, projected, spec.kernel_side)
        stats = fit_normalization(all_patches)
        in_channels = next(iter(current.values())).shape[2]
        bank = learn_filters(
            group_patches_by_marker(current, projected, spec.kernel_side),
            stats,
            spec.filters_per_marker,
            seed=seed + 1000 * li,
            side=spec.kernel_side,
            in_channels=in_channels,
        )
        bank = reduce_filters(bank, spec.max_filters, seed=seed + 1000 * li + 500)
        model.layers.append((spec, bank))
        current = {iid: forward_layer(img, spec, bank) for iid, img in current.items()}
        stride *= spec.pool_stride
    return model


def load_architecture(path) -> tuple[int, list[LayerSpec]]:
    """Load the JSON architecture config: {input_channels, layers: [...]}."""
    cfg = json.loads(Path(path).read_text())
    specs = [LayerSpec(**layer) for layer in cfg["layers"]]
    return int(cfg["input_channels"]), specs


def save_model(path, model: EncoderModel) -> None:
    """Versioned binary model file plus a JSON sidecar mirror."""
    path = Path(path)
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<II", MODEL_VERSION, model.depth)
    buf += struct.pack("<I", model.input_channels)
    for spec, bank in model.layers:
        act = {"relu": 1, "none": 0}[spec.activation]
        pool = {"max": 1, "avg": 2, "none": 0}[spec.pool]
        buf += struct.pack(
            "<IIIIIII",
            spec.kernel_side, act, pool, spec.pool_side, spec.pool_stride,
            spec.filters_per_marker, spec.max_filters,
        )
        buf += struct.pack("<III", bank.side, bank.in_channels, len(bank))
        buf += struct.pack("<d", bank.stats.epsilon)
        for arr in (bank.stats.mean, bank.stats.stdev, bank.kernels):
            data = np.ascontiguousarray(arr, dtype="<f8")
            buf += data.tobytes()
    path.write_bytes(bytes(buf))
    sidecar = {
        "version": MODEL_VERSION,
        "input_channels": model.input_channels,
        "layers": [
            {
                "spec": {
                    "kernel_side": spec.kernel_side,
                    "activation": spec.activation,
                    "pool": spec.pool,
                    "pool_side": spec.pool_side,
                    "pool_stride": spec.pool_stride,
                    "filters_per_marker": spec.filters_per_marker,
                    "max_filters": spec.max_filters,
                },
                "in_channels": bank.in_channels,
                "n_kernels": len(bank),
                "stats": {
                    "mean": bank.stats.mean.tolist(),
                    "stdev": bank.stats.stdev.tolist(),
                    "epsilon": bank.stats.epsilon,
                },
                "kernels": bank.kernels.tolist(),
            }
            for spec, bank in model.layers
        ],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_model(path) -> EncoderModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError("not a FLIM model file")
    off = 4
    version, depth = struct.unpack_from("<II", data, off)
    off += 8
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    (input_channels,) = struct.unpack_from("<I", data, off)
    off += 4
    model = EncoderModel(input_channels=input_channels)
    for _ in range(depth):
        ks, act, pool, ps, pst, fpm, mf = struct.unpack_from("<IIIIIII", data, off)
        off += 28
        spec = LayerSpec(
            kernel_side=ks,
            activation={1: "relu", 0: "none"}[act],
            pool={1: "max", 2: "avg", 0: "none"}[pool],
            pool_side=ps,
            pool_stride=pst,
            filters_per_marker=fpm,
            max_filters=mf,
        )
        side, in_ch, n = struct.unpack_from("<III", data, off)
        off += 12
        (eps,) = struct.unpack_from("<d", data, off)
        off += 8
        dim = side * side * in_ch
        mean = np.frombuffer(data, dtype="<f8", count=dim, offset=off).copy()
        off += dim * 8
        stdev = np.frombuffer(data, dtype="<f8", count=dim, offset=off).copy()
        off += dim * 8
        kernels = np.frombuffer(data, dtype="<f8", count=n * dim, offset=off).copy()
        off += n * dim * 8
        bank = FilterBank(side, in_ch, kernels.reshape(n, dim), NormalizationStats(mean, stdev, eps))
        model.layers.append((spec, bank))
    return model
