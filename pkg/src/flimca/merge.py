"""Three-filter fusion network for the per-level evolved saliencies.

One 3x3 kernel reads the input image, one 3x3 kernel reads the stacked
saliencies, and a 1x1 head combines the two sigmoid feature maps into the
final saliency. Gradients are analytic (reverse-mode through the three
conv+sigmoid stages) and training is full-batch Adam with cosine-annealed
learning rate and seeded paired augmentations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imagery

PRED_CLAMP = 1e-7


@dataclass
class MergeNet:
    conv_o: np.ndarray  # (3, 3, c)
    bias_o: float
    conv_s: np.ndarray  # (3, 3, L)
    bias_s: float
    conv_head: np.ndarray  # (2,)
    bias_head: float

    @property
    def c(self) -> int:
        return self.conv_o.shape[2]

    @property
    def num_levels(self) -> int:
        return self.conv_s.shape[2]

    def param_count(self) -> int:
        return self.conv_o.size + self.conv_s.size + self.conv_head.size + 3

    def params_flat(self) -> np.ndarray:
        return np.concatenate(
            [
                self.conv_o.ravel(),
                [self.bias_o],
                self.conv_s.ravel(),
                [self.bias_s],
                self.conv_head.ravel(),
                [self.bias_head],
            ]
        )

    def set_params_flat(self, flat: np.ndarray) -> None:
        i = 0
        n = self.conv_o.size
        self.conv_o = flat[i:i + n].reshape(self.conv_o.shape).copy()
        i += n
        self.bias_o = float(flat[i]); i += 1
        n = self.conv_s.size
        self.conv_s = flat[i:i + n].reshape(self.conv_s.shape).copy()
        i += n
        self.bias_s = float(flat[i]); i += 1
        self.conv_head = flat[i:i + 2].copy(); i += 2
        self.bias_head = float(flat[i])


@dataclass
class TrainSample:
    image: np.ndarray  # (h, w, c)
    saliencies: list[np.ndarray]  # L x (h, w)
    target: np.ndarray  # (h, w) boolean


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-2
    min_lr: float = 1e-5
    restart_period: int = 1000
    l1_lambda: float = 1e-3
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def init_net(c: int, num_levels: int, seed: int) -> MergeNet:
    rng = np.random.default_rng(seed)
    return MergeNet(
        conv_o=rng.uniform(-0.1, 0.1, size=(3, 3, c)),
        bias_o=float(rng.uniform(-0.1, 0.1)),
        conv_s=rng.uniform(-0.1, 0.1, size=(3, 3, num_levels)),
        bias_s=float(rng.uniform(-0.1, 0.1)),
        conv_head=rng.uniform(-0.1, 0.1, size=2),
        bias_head=float(rng.uniform(-0.1, 0.1)),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv3x3(stack: np.ndarray, kernel: np.ndarray, bias: float) -> np.ndarray:
    """Single-output-channel 3x3 correlation with zero padding."""
    h, w, _ = stack.shape
    padded = np.pad(stack, ((1, 1), (1, 1), (0, 0)))
    out = np.full((h, w), bias, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + h, dx:dx + w] @ kernel[dy, dx]
    return out


def _stack_saliencies(saliencies: list[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(s, dtype=np.float64) for s in saliencies], axis=-1)


def merge_forward(net: MergeNet, image: np.ndarray, saliencies: list[np.ndarray]) -> np.ndarray:
    """Final saliency map in (0, 1), same spatial size as the inputs."""
    image = imagery.as_channels(image)
    if len(saliencies) != net.num_levels:
        raise ValueError(f"expected {net.num_levels} saliencies, got {len(saliencies)}")
    if image.shape[2] != net.c:
        raise ValueError(f"expected {net.c} image channels, got {image.shape[2]}")
    f_o = _sigmoid(_conv3x3(image, net.conv_o, net.bias_o))
    f_s = _sigmoid(_conv3x3(_stack_saliencies(saliencies), net.conv_s, net.bias_s))
    z = net.conv_head[0] * f_o + net.conv_head[1] * f_s + net.bias_head
    return _sigmoid(z)


def merge_loss(pred: np.ndarray, target: np.ndarray, net: MergeNet, l1_lambda: float) -> float:
    """Mean binary cross-entropy plus l1 penalty on all parameters."""
    if pred.shape != target.shape:
        raise ValueError("prediction/target domain mismatch")
    t = np.asarray(target, dtype=np.float64)
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    bce = float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))
    return bce + l1_lambda * float(np.abs(net.params_flat()).sum())


@dataclass
class Gradients:
    conv_o: np.ndarray
    bias_o: float
    conv_s: np.ndarray
    bias_s: float
    conv_head: np.ndarray
    bias_head: float

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [
                self.conv_o.ravel(),
                [self.bias_o],
                self.conv_s.ravel(),
                [self.bias_s],
                self.conv_head.ravel(),
                [self.bias_head],
            ]
        )


def _conv3x3_weight_grad(stack: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Gradient of sum(delta * conv3x3(stack, W)) w.r.t. W."""
    h, w, m = stack.shape
    padded = np.pad(stack, ((1, 1), (1, 1), (0, 0)))
    grad = np.empty((3, 3, m), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            grad[dy, dx] = np.tensordot(delta, padded[dy:dy + h, dx:dx + w], axes=([0, 1], [0, 1]))
    return grad


def merge_backward(net: MergeNet, sample: TrainSample, l1_lambda: float = 0.0) -> tuple[float, Gradients]:
    """Loss and exact analytic gradients for one sample."""
    image = imagery.as_channels(sample.image)
    sal = _stack_saliencies(sample.saliencies)
    t = np.asarray(sample.target, dtype=np.float64)
    a_o = _conv3x3(image, net.conv_o, net.bias_o)
    a_s = _conv3x3(sal, net.conv_s, net.bias_s)
    f_o = _sigmoid(a_o)
    f_s = _sigmoid(a_s)
    z = net.conv_head[0] * f_o + net.conv_head[1] * f_s + net.bias_head
    y = _sigmoid(z)
    n = y.size
    yc = np.clip(y, PRED_CLAMP, 1.0 - PRED_CLAMP)
    loss = float(-np.mean(t * np.log(yc) + (1.0 - t) * np.log(1.0 - yc)))
    loss += l1_lambda * float(np.abs(net.params_flat()).sum())
    # dL/dz = (y - t)/n where the clamp is inactive, 0 where it binds
    active = (y > PRED_CLAMP) & (y < 1.0 - PRED_CLAMP)
    dz = np.where(active, (y - t) / n, 0.0)
    d_head = np.array([float(np.sum(dz * f_o)), float(np.sum(dz * f_s))])
    d_bias_head = float(np.sum(dz))
    da_o = dz * net.conv_head[0] * f_o * (1.0 - f_o)
    da_s = dz * net.conv_head[1] * f_s * (1.0 - f_s)
    d_conv_o = _conv3x3_weight_grad(image, da_o)
    d_conv_s = _conv3x3_weight_grad(sal, da_s)
    grads = Gradients(
        conv_o=d_conv_o,
        bias_o=float(np.sum(da_o)),
        conv_s=d_conv_s,
        bias_s=float(np.sum(da_s)),
        conv_head=d_head,
        bias_head=d_bias_head,
    )
    if l1_lambda:
        reg = l1_lambda * np.sign(net.params_flat())
        flat = grads.flat() + reg
        grads = _gradients_from_flat(net, flat)
    return loss, grads


def _gradients_from_flat(net: MergeNet, flat: np.ndarray) -> Gradients:
    i = 0
    n = net.conv_o.size
    conv_o = flat[i:i + n].reshape(net.conv_o.shape); i += n
    bias_o = float(flat[i]); i += 1
    n = net.conv_s.size
    conv_s = flat[i:i + n].reshape(net.conv_s.shape); i += n
    bias_s = float(flat[i]); i += 1
    conv_head = flat[i:i + 2]; i += 2
    bias_head = float(flat[i])
    return Gradients(conv_o, bias_o, conv_s, bias_s, conv_head, bias_head)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts every cfg.restart_period epochs."""
    period = max(1, cfg.restart_period)
    t = epoch % period
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t / period))


def train(samples: list[TrainSample], cfg: TrainConfig) -> tuple[MergeNet, list[float]]:
    """Full-batch Adam training; returns the net and the per-epoch loss curve."""
    if not samples:
        raise ValueError("need at least one training sample")
    c = imagery.as_channels(samples[0].image).shape[2]
    num_levels = len(samples[0].saliencies)
    net = init_net(c, num_levels, cfg.seed)
    theta = net.params_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        grad = np.zeros_like(theta)
        total = 0.0
        for sample in samples:
            if cfg.augment:
                sample = augment_sample(sample, rng)
            loss, g = merge_backward(net, sample, l1_lambda=0.0)
            total += loss
            grad += g.flat()
        grad /= len(samples)
        total /= len(samples)
        total += cfg.l1_lambda * float(np.abs(theta).sum())
        grad += cfg.l1_lambda * np.sign(theta)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mh = m / (1 - beta1 ** (epoch + 1))
        vh = v / (1 - beta2 ** (epoch + 1))
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
        net.set_params_flat(theta)
        losses.append(total)
    return net, losses


# ---------------------------------------------------------------------------
# Paired augmentations: one sampled transform applied identically to the
# image, every saliency layer, and the target (nearest-neighbor for targets).


@dataclass
class Augmentation:
    hflip: bool = False
    vflip: bool = False
    crop: tuple | None = None  # (y0, x0, crop_h, crop_w)
    matrix: np.ndarray | None = None  # 3x3 inverse homography (output -> input)
    sharpness: float | None = None

    def apply(self, raster: np.ndarray, nearest: bool = False) -> np.ndarray:
        out = np.asarray(raster, dtype=np.float64)
        h, w = out.shape[:2]
        if self.crop is not None:
            y0, x0, ch, cw = self.crop
            out = out[y0:y0 + ch, x0:x0 + cw]
            out = _resize(out, h, w, nearest=nearest)
        if self.hflip:
            out = out[:, ::-1].copy()
        if self.vflip:
            out = out[::-1, :].copy()
        if self.matrix is not None:
            out = _warp(out, self.matrix, nearest=nearest)
        if self.sharpness is not None and not nearest:
            out = _sharpen(out, self.sharpness)
        return out


def sample_augmentation(rng: np.random.Generator, h: int, w: int) -> Augmentation:
    """Random crop/flip/rotate/affine/perspective/sharpness pipeline."""
    aug = Augmentation()
    if rng.random() < 0.5:
        scale = rng.uniform(0.8, 1.0)
        ch, cw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        aug.crop = (y0, x0, ch, cw)
    aug.hflip = bool(rng.random() < 0.5)
    aug.vflip = bool(rng.random() < 0.5)
    kind = rng.choice(["none", "rotate", "affine", "perspective"])
    if kind == "rotate":
        angle = math.radians(rng.uniform(-30.0, 30.0))
        aug.matrix = _rotation_matrix(angle, h, w)
    elif kind == "affine":
        tx = rng.uniform(-0.1, 0.1) * w
        ty = rng.uniform(-0.1, 0.1) * h
        shear = math.radians(rng.uniform(-10.0, 10.0))
        aug.matrix = _affine_matrix(tx, ty, shear, h, w)
    elif kind == "perspective":
        aug.matrix = _perspective_matrix(rng, h, w, 0.2)
    if rng.random() < 0.5:
        aug.sharpness = float(rng.uniform(0.5, 2.0))
    return aug


def augment_sample(sample: TrainSample, rng: np.random.Generator) -> TrainSample:
    h, w = np.asarray(sample.target).shape
    aug = sample_augmentation(rng, h, w)
    image = aug.apply(sample.image)
    saliencies = [aug.apply(s) for s in sample.saliencies]
    target = aug.apply(np.asarray(sample.target, dtype=np.float64), nearest=True) >= 0.5
    return TrainSample(image, saliencies, target)


def _resize(arr: np.ndarray, out_h: int, out_w: int, nearest: bool) -> np.ndarray:
    squeeze = arr.ndim == 2
    a = imagery.as_channels(arr)
    h, w, _ = a.shape
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    if nearest:
        out = a[np.round(ys).astype(int)][:, np.round(xs).astype(int)]
    else:
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = (ys - y0)[:, None, None]
        wx = (xs - x0)[None, :, None]
        top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
        bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
        out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def _rotation_matrix(angle: float, h: int, w: int) -> np.ndarray:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    c, s = math.cos(angle), math.sin(angle)
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    # inverse map: rotate output coords by -angle around the center
    return back @ np.linalg.inv(rot) @ to_center


def _affine_matrix(tx: float, ty: float, shear: float, h: int, w: int) -> np.ndarray:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sh = math.tan(shear)
    fwd = np.array([[1, sh, tx], [0, 1, ty], [0, 0, 1]], dtype=np.float64)
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    return back @ np.linalg.inv(fwd) @ to_center


def _perspective_matrix(rng: np.random.Generator, h: int, w: int, distortion: float) -> np.ndarray:
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    jitter = rng.uniform(-distortion, distortion, size=(4, 2)) * [w, h]
    dst = src + jitter
    fwd = _homography(src, dst)
    return np.linalg.inv(fwd)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        b.append(u)
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.append(v)
    params = np.linalg.solve(np.asarray(a), np.asarray(b))
    return np.append(params, 1.0).reshape(3, 3)


def _warp(arr: np.ndarray, inv: np.ndarray, nearest: bool) -> np.ndarray:
    squeeze = arr.ndim == 2
    a = imagery.as_channels(arr)
    h, w, m = a.shape
    ys, xs = np.mgrid[0:h, 0:w]
    coords = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    mapped = inv @ coords
    sx = mapped[0] / mapped[2]
    sy = mapped[1] / mapped[2]
    if nearest:
        ix = np.round(sx).astype(int)
        iy = np.round(sy).astype(int)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.zeros((h * w, m), dtype=np.float64)
        out[inside] = a[iy[inside], ix[inside]]
    else:
        x0 = np.floor(sx).astype(int)
        y0 = np.floor(sy).astype(int)
        fx = sx - x0
        fy = sy - y0
        out = np.zeros((h * w, m), dtype=np.float64)
        for oy, ox, wgt in (
            (0, 0, (1 - fx) * (1 - fy)),
            (0, 1, fx * (1 - fy)),
            (1, 0, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            yy = y0 + oy
            xx = x0 + ox
            inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            out[inside] += wgt[inside, None] * a[yy[inside], xx[inside]]
    out = out.reshape(h, w, m)
    return out[:, :, 0] if squeeze else out


def _sharpen(arr: np.ndarray, factor: float) -> np.ndarray:
    a = imagery.as_channels(arr)
    h, w, _ = a.shape
    padded = np.pad(a, ((1, 1), (1, 1), (0, 0)), mode="edge")
    blur = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            blur += padded[dy:dy + h, dx:dx + w]
    blur /= 9.0
    out = np.clip(blur + factor * (a - blur), 0.0, 1.0)
    return out[:, :, 0] if arr.ndim == 2 else out


def save_net(path, net: MergeNet, cfg: TrainConfig | None = None, final_loss: float | None = None) -> None:
    payload = {
        "c": net.c,
        "num_levels": net.num_levels,
        "conv_o": net.conv_o.tolist(),
        "bias_o": net.bias_o,
        "conv_s": net.conv_s.tolist(),
        "bias_s": net.bias_s,
        "conv_head": net.conv_head.tolist(),
        "bias_head": net.bias_head,
    }
    if cfg is not None:
        payload["train_config"] = {
            "epochs": cfg.epochs, "lr": cfg.lr, "min_lr": cfg.min_lr,
            "restart_period": cfg.restart_period, "l1_lambda": cfg.l1_lambda,
            "seed": cfg.seed, "augment": cfg.augment,
        }
    if final_loss is not None:
        payload["final_loss"] = final_loss
    Path(path).write_text(json.dumps(payload))


def load_net(path) -> MergeNet:
    data = json.loads(Path(path).read_text())
    return MergeNet(
        conv_o=np.asarray(data["conv_o"], dtype=np.float64),
        bias_o=float(data["bias_o"]),
        conv_s=np.asarray(data["conv_s"], dtype=np.float64),
        bias_s=float(data["bias_s"]),
        conv_head=np.asarray(data["conv_head"], dtype=np.float64),
        bias_head=float(data["bias_head"]),
    )
