"""GrowCut-style cellular automaton seeded from saliency maps.

Each cell carries foreground/background strengths and a label; neighbors
conquer a cell when their strength, attenuated by an exponential similarity
of the guide image, exceeds the cell's running maximum. Evolution is strictly
double-buffered, so results are deterministic and parallel-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import imagery

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

# Moore neighborhood in fixed row-major scan order (tie determinism)
MOORE_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]

STRENGTH_CLAMP = 1e-6


@dataclass
class EvolutionConfig:
    beta: float = 0.6
    smoothing_rule: str = "parasite"  # parasite | brain
    lab_threshold: float = 0.2
    convergence_eps: float = 1e-8
    max_iterations: int = 10000

    def __post_init__(self):
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if self.convergence_eps <= 0:
            raise ValueError("convergence_eps must be positive")
        if self.smoothing_rule not in ("parasite", "brain"):
            raise ValueError(f"unknown smoothing rule {self.smoothing_rule!r}")


@dataclass
class ThresholdStrategy:
    kind: str = "otsu_on_probability"  # otsu_on_probability | histogram_peak
    k_sigma: float = 2.5
    top_fraction: float = 0.10
    window_fraction: float = 0.20
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("otsu_on_probability", "histogram_peak"):
            raise ValueError(f"unknown threshold strategy {self.kind!r}")
        if self.k_sigma <= 0:
            raise ValueError("k_sigma must be positive")
        for f in (self.top_fraction, self.window_fraction):
            if not (0.0 < f < 1.0):
                raise ValueError("fractions must lie in (0, 1)")


@dataclass
class CAState:
    theta_fg: np.ndarray
    theta_bg: np.ndarray
    labels: np.ndarray  # {0, 1} per cell
    guide: np.ndarray


@dataclass
class EvolutionInfo:
    iterations: int = 0
    final_dist: float = float("inf")
    converged: bool = False
    extra: dict = field(default_factory=dict)


def init_foreground(saliency: np.ndarray) -> np.ndarray:
    """Foreground strengths: the saliency min-max normalized to [0, 1]."""
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.ndim != 2:
        raise ValueError("saliency must be single-channel")
    lo, hi = sal.min(), sal.max()
    if hi <= lo:
        return np.zeros_like(sal)
    return (sal - lo) / (hi - lo)


def init_background_dilation(saliency: np.ndarray, radius: float = 10.0) -> np.ndarray:
    """Background strengths: complement of the dilated saliency."""
    return 1.0 - imagery.dilate(np.asarray(saliency, dtype=np.float64), radius)


def init_background_prior(mask: np.ndarray) -> np.ndarray:
    """Background strengths from a domain prior: 1 outside the mask, 0 inside."""
    return np.where(np.asarray(mask, dtype=bool), 0.0, 1.0)


def init_labels(theta_fg: np.ndarray) -> np.ndarray:
    """Label map: 1 wherever the initial foreground strength is positive."""
    return (np.asarray(theta_fg, dtype=np.float64) > 0.0).astype(np.float64)


def _guide_channels(guide: np.ndarray) -> np.ndarray:
    return imagery.as_channels(guide)


def similarity(state: CAState, p: tuple[int, int], q: tuple[int, int], cfg: EvolutionConfig) -> float:
    """Attack attenuation g(p, q) in (0, 1] for a Moore neighbor q of p."""
    guide = _guide_channels(state.guide)
    gp = guide[p[0], p[1]]
    gq = guide[q[0], q[1]]
    d = float(np.sqrt(np.sum((gp - gq) ** 2)))
    smoothing = state.labels[q[0], q[1]] == 1
    if smoothing:
        if cfg.smoothing_rule == "brain":
            smoothing = guide.shape[2] == 1 and gp[0] > gq[0]
        else:
            smoothing = d < cfg.lab_threshold
    return float(np.exp(-cfg.beta * d)) if smoothing else float(np.exp(-d))


def _shift(arr: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    """arr evaluated at p + (dy, dx); out-of-domain positions get `fill`."""
    out = np.full_like(arr, fill)
    h, w = arr.shape[:2]
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ysrc = slice(max(0, dy), min(h, h + dy))
    xsrc = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = arr[ysrc, xsrc]
    return out


def _precompute_g(guide: np.ndarray, cfg: EvolutionConfig):
    """Per-offset plain/smooth attenuations and the static smoothing test.

    Attenuations are zeroed where the neighbor falls outside the domain;
    since strengths are nonnegative, a zero attack can never conquer.
    """
    guide = _guide_channels(guide)
    h, w, _ = guide.shape
    per_offset = []
    for dy, dx in MOORE_OFFSETS:
        gq = np.zeros_like(guide)
        valid = np.zeros((h, w), dtype=bool)
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        gq[ys, xs] = guide[max(0, dy):min(h, h + dy), max(0, dx):min(w, w + dx)]
        valid[ys, xs] = True
        diff = guide - gq
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        if cfg.smoothing_rule == "brain":
            static = (guide.shape[2] == 1) & (guide[:, :, 0] > gq[:, :, 0])
            static = static & valid
        else:
            static = (d < cfg.lab_threshold) & valid
        g_plain = np.exp(-d)
        g_smooth = np.exp(-cfg.beta * d)
        g_plain[~valid] = 0.0
        g_smooth[~valid] = 0.0
        per_offset.append((g_plain, g_smooth, static))
    return per_offset


def _attack_step_numpy(theta, lm, g_plain, g_smooth, static, offs,
                       active, new_theta, new_lm, changed):
    """One double-buffered conquest sweep over every cell (vectorized)."""
    h, w = theta.shape
    new_theta[...] = theta
    new_lm[...] = lm
    qmax = theta.copy()
    theta_pad = np.zeros((h + 2, w + 2))
    lm_pad = np.zeros((h + 2, w + 2))
    theta_pad[1:-1, 1:-1] = theta
    lm_pad[1:-1, 1:-1] = lm
    for k in range(offs.shape[0]):
        dy, dx = int(offs[k, 0]), int(offs[k, 1])
        theta_q = theta_pad[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]
        lm_q = lm_pad[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]
        g = np.where((lm_q == 1.0) & static[k], g_smooth[k], g_plain[k])
        q_aux = g * theta_q
        win = q_aux > qmax
        new_theta[win] = q_aux[win]
        new_lm[win] = lm_q[win]
        qmax[win] = q_aux[win]
    np.not_equal(new_theta, theta, out=changed)
    changed |= new_lm != lm


if _HAVE_NUMBA:

    @njit(cache=True)
    def _attack_step_jit(theta, lm, g_plain, g_smooth, static, offs,
                         active, new_theta, new_lm, changed):
        """One conquest sweep; cells outside the active frontier are copied.

        Exactness of the skip: a cell's next state depends only on its own
        3x3 neighborhood, so any cell whose neighborhood did not change in
        the previous sweep reproduces its current state bit for bit.
        """
        h, w = theta.shape
        n_off = offs.shape[0]
        for y in range(h):
            for x in range(w):
                if not active[y, x]:
                    new_theta[y, x] = theta[y, x]
                    new_lm[y, x] = lm[y, x]
                    changed[y, x] = False
                    continue
                best = theta[y, x]
                best_lm = lm[y, x]
                for k in range(n_off):
                    qy = y + offs[k, 0]
                    qx = x + offs[k, 1]
                    if qy < 0 or qy >= h or qx < 0 or qx >= w:
                        continue
                    if lm[qy, qx] == 1.0 and static[k, y, x]:
                        g = g_smooth[k, y, x]
                    else:
                        g = g_plain[k, y, x]
                    q_aux = g * theta[qy, qx]
                    if q_aux > best:
                        best = q_aux
                        best_lm = lm[qy, qx]
                new_theta[y, x] = best
                new_lm[y, x] = best_lm
                changed[y, x] = best != theta[y, x] or best_lm != lm[y, x]


def evolve(state: CAState, ol: int, cfg: EvolutionConfig) -> tuple[np.ndarray, EvolutionInfo]:
    """Run the conquest loop on one strength map until convergence.

    Updates state.theta_fg/theta_bg and state.labels in place and returns the
    converged strength map plus run metadata.
    """
    if ol not in (0, 1):
        raise ValueError("ol must be 0 or 1")
    theta = (state.theta_fg if ol == 1 else state.theta_bg).astype(np.float64, copy=True)
    lm = state.labels.astype(np.float64, copy=True)
    if theta.min() < 0:
        raise ValueError("strengths must be nonnegative")
    h, w = theta.shape
    npix = theta.size
    per_offset = _precompute_g(state.guide, cfg)
    g_plain = np.stack([p for p, _, _ in per_offset])
    g_smooth = np.stack([s for _, s, _ in per_offset])
    static = np.stack([st for _, _, st in per_offset])
    offs = np.array(MOORE_OFFSETS, dtype=np.int64)
    step = _attack_step_jit if _HAVE_NUMBA else _attack_step_numpy
    info = EvolutionInfo()
    new_theta = np.empty_like(theta)
    new_lm = np.empty_like(lm)
    changed = np.empty((h, w), dtype=bool)
    active = np.ones((h, w), dtype=bool)
    dilate_3x3 = np.ones((3, 3), dtype=bool)
    for it in range(cfg.max_iterations):
        step(theta, lm, g_plain, g_smooth, static, offs,
             active, new_theta, new_lm, changed)
        dist = float(np.linalg.norm(theta - new_theta)) / npix
        theta, new_theta = new_theta, theta
        lm, new_lm = new_lm, lm
        info.iterations = it + 1
        info.final_dist = dist
        if dist <= cfg.convergence_eps:
            info.converged = True
            break
        # only cells whose 3x3 neighborhood changed can change next sweep
        active = ndimage.binary_dilation(changed, structure=dilate_3x3)
    state.labels = lm
    if ol == 1:
        state.theta_fg = theta
    else:
        state.theta_bg = theta
    return theta, info


def probability_map(theta_fg: np.ndarray, theta_bg: np.ndarray) -> np.ndarray:
    """Log-ratio fusion of converged strengths into an object probability map."""
    fg = np.clip(np.asarray(theta_fg, dtype=np.float64), STRENGTH_CLAMP, 1.0 - STRENGTH_CLAMP)
    bg = np.clip(np.asarray(theta_bg, dtype=np.float64), STRENGTH_CLAMP, 1.0 - STRENGTH_CLAMP)
    if fg.shape != bg.shape:
        raise ValueError("strength maps must share one domain")
    lf, lb = np.log(fg), np.log(bg)
    return lb / (lb + lf)


def binarize(prob: np.ndarray, guide: np.ndarray, strategy: ThresholdStrategy) -> np.ndarray:
    """Threshold the probability map into a binary saliency mask."""
    prob = np.asarray(prob, dtype=np.float64)
    mask = strategy.mask
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != prob.shape:
            raise ValueError("strategy mask domain mismatch")
        if not mask.any():
            raise ValueError("empty strategy mask")
    if strategy.kind == "otsu_on_probability":
        thr, degenerate = imagery.otsu_threshold(prob, mask)
        out = prob > thr if not degenerate else np.zeros_like(prob, dtype=bool)
        if mask is not None:
            out &= mask
        return out
    # histogram_peak: statistics of the guide intensity inside the mask
    intensity = guide if guide.ndim == 2 else imagery.as_channels(guide).mean(axis=2)
    domain = mask if mask is not None else np.ones_like(prob, dtype=bool)
    vals = intensity[domain]
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        return np.zeros_like(prob, dtype=bool)
    span = hi - lo
    top_lo = hi - strategy.top_fraction * span
    hist, edges = np.histogram(vals, bins=256, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    in_top = centers >= top_lo
    if not in_top.any() or hist[in_top].sum() == 0:
        return np.zeros_like(prob, dtype=bool)
    top_idx = np.flatnonzero(in_top)
    peak = float(centers[top_idx[np.argmax(hist[top_idx])]])
    half = strategy.window_fraction * span / 2.0
    window = vals[(vals >= peak - half) & (vals <= peak + half)]
    mu = float(window.mean())
    sigma = float(window.std())
    tau = mu - strategy.k_sigma * sigma
    return (prob >= 0.5) & (intensity >= tau) & domain


def run_level(
    saliency: np.ndarray,
    guide: np.ndarray,
    cfg: EvolutionConfig,
    strategy: ThresholdStrategy,
    background_init: str = "dilation",
    dilation_radius: float = 10.0,
    prior_mask: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Initialize, evolve foreground then background, fuse, and binarize.

    Returns (probability map, binary mask, run metadata).
    """
    theta_fg = init_foreground(saliency)
    if background_init == "dilation":
        theta_bg = init_background_dilation(theta_fg, dilation_radius)
    elif background_init == "prior":
        if prior_mask is None:
            raise ValueError("prior background init needs a mask")
        theta_bg = init_background_prior(prior_mask)
    else:
        raise ValueError(f"unknown background init {background_init!r}")
    state = CAState(theta_fg, theta_bg, init_labels(theta_fg), guide)
    _, info_fg = evolve(state, 1, cfg)
    _, info_bg = evolve(state, 0, cfg)
    prob = probability_map(state.theta_fg, state.theta_bg)
    mask = binarize(prob, guide, strategy)
    meta = {
        "foreground": {"iterations": info_fg.iterations, "final_dist": info_fg.final_dist,
                       "converged": info_fg.converged},
        "background": {"iterations": info_bg.iterations, "final_dist": info_bg.final_dist,
                       "converged": info_bg.converged},
    }
    return prob, mask, meta
