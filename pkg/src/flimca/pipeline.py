"""Batch orchestration: manifests, configs, and the end-to-end commands."""

from __future__ import annotations

import json
import time
import multiprocessing
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ca, decoder, flim, imagery, merge, metrics, synth


class ConfigError(Exception):
    """Bad configuration or arguments (CLI exit code 2)."""


class DataError(Exception):
    """Missing or inconsistent data (CLI exit code 3)."""


@dataclass
class Manifest:
    root: Path
    entries: dict[str, dict]  # image_id -> entry
    splits: dict[str, list[str]]

    def path(self, image_id: str, key: str) -> Path | None:
        rel = self.entries[image_id].get(key)
        return self.root / rel if rel else None

    def split_ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DataError(f"manifest has no split {split!r}")
        return self.splits[split]


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    root = Path(raw.get("root", path.parent))
    if not root.is_absolute():
        root = path.parent / root
    entries = {}
    for entry in raw["entries"]:
        iid = entry["image_id"]
        if iid in entries:
            raise DataError(f"duplicate image_id {iid!r} in manifest")
        img = root / entry["image_path"]
        if not img.exists():
            raise DataError(f"image file missing: {img}")
        entries[iid] = entry
    splits = {name: list(ids) for name, ids in raw.get("splits", {}).items()}
    for name, ids in splits.items():
        for iid in ids:
            if iid not in entries:
                raise DataError(f"split {name!r} references unknown id {iid!r}")
    return Manifest(root, entries, splits)


@dataclass
class PipelineConfig:
    architecture: str = ""
    decoder: decoder.DecoderParams = field(default_factory=decoder.DecoderParams)
    background_init: str = "dilation"
    dilation_radius: float = 10.0
    evolution: ca.EvolutionConfig = field(default_factory=ca.EvolutionConfig)
    threshold: ca.ThresholdStrategy = field(default_factory=ca.ThresholdStrategy)
    merge_train: merge.TrainConfig = field(default_factory=merge.TrainConfig)
    metric_params: metrics.MetricParams = field(default_factory=metrics.MetricParams)
    seed: int = 0
    time_budget_s: float | None = None


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = PipelineConfig()
    try:
        if "architecture" in raw:
            arch = Path(raw["architecture"])
            cfg.architecture = str(arch if arch.is_absolute() else path.parent / arch)
        if "decoder" in raw:
            cfg.decoder = decoder.DecoderParams(**raw["decoder"])
        cfg.background_init = raw.get("background_init", cfg.background_init)
        cfg.dilation_radius = raw.get("dilation_radius", cfg.dilation_radius)
        if "evolution" in raw:
            cfg.evolution = ca.EvolutionConfig(**raw["evolution"])
        if "threshold" in raw:
            cfg.threshold = ca.ThresholdStrategy(**raw["threshold"])
        if "merge_train" in raw:
            cfg.merge_train = merge.TrainConfig(**raw["merge_train"])
        if "metrics" in raw:
            mp = dict(raw["metrics"])
            if mp.get("area_range") is not None:
                mp["area_range"] = tuple(mp["area_range"])
            cfg.metric_params = metrics.MetricParams(**mp)
        cfg.seed = raw.get("seed", cfg.seed)
        cfg.time_budget_s = raw.get("time_budget_s", cfg.time_budget_s)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config {path}: {e}") from e
    if cfg.background_init not in ("dilation", "prior"):
        raise ConfigError(f"unknown background_init {cfg.background_init!r}")
    return cfg


def _load_image(manifest: Manifest, image_id: str) -> np.ndarray:
    return imagery.read_image(manifest.path(image_id, "image_path"))


def _load_gt(manifest: Manifest, image_id: str) -> np.ndarray | None:
    p = manifest.path(image_id, "gt_path")
    return imagery.read_mask(p) if p and p.exists() else None


def _load_prior_mask(manifest: Manifest, image_id: str) -> np.ndarray | None:
    p = manifest.path(image_id, "mask_path")
    return imagery.read_mask(p) if p and p.exists() else None


def _guide_for(img: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    if cfg.evolution.smoothing_rule == "parasite" and img.ndim == 3 and img.shape[2] == 3:
        return imagery.rgb_to_lab(img)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    return img


def cmd_learn_encoder(manifest: Manifest, markers: list[flim.Marker],
                      arch_path, out_path, seed: int = 0) -> dict:
    """Train the encoder layer by layer from markers; write model + summary."""
    if not markers:
        raise DataError("no markers provided")
    input_channels, specs = flim.load_architecture(arch_path)
    image_ids = sorted({m.image_id for m in markers})
    missing = [iid for iid in image_ids if iid not in manifest.entries]
    if missing:
        raise DataError(f"markers reference unknown images: {missing}")
    images = {iid: _load_image(manifest, iid) for iid in image_ids}
    model = flim.train_encoder(images, markers, specs, input_channels, seed=seed)
    flim.save_model(out_path, model)
    summary = {
        "training_images": image_ids,
        "marker_count": len(markers),
        "filters_per_layer": [len(bank) for _, bank in model.layers],
    }
    Path(str(out_path) + ".summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _run_level_args(args):
    sal, guide, cfg, strategy, prior_mask = args
    return ca.run_level(
        sal, guide, cfg.evolution, strategy,
        background_init=cfg.background_init,
        dilation_radius=cfg.dilation_radius,
        prior_mask=prior_mask,
    )


def infer_image(
    image: np.ndarray,
    model: flim.EncoderModel,
    cfg: PipelineConfig,
    prior_mask: np.ndarray | None = None,
    merge_net: merge.MergeNet | None = None,
    jobs: int = 1,
) -> dict:
    """Full single-image chain: encoder -> decoder -> per-level CA -> merge."""
    img = imagery.as_channels(image)
    h, w, _ = img.shape
    features = flim.forward_encoder(img, model)
    saliencies = decoder.decode_stack(features, cfg.decoder, h, w)
    guide = _guide_for(img, cfg)
    strategy = cfg.threshold
    if cfg.background_init == "prior" or strategy.kind == "histogram_peak":
        if prior_mask is None and cfg.background_init == "prior":
            raise DataError("prior background init requires a mask")
    if prior_mask is not None and strategy.mask is None:
        strategy = ca.ThresholdStrategy(
            kind=strategy.kind, k_sigma=strategy.k_sigma,
            top_fraction=strategy.top_fraction,
            window_fraction=strategy.window_fraction, mask=prior_mask,
        )

    def one_level(sal):
        return ca.run_level(
            sal, guide, cfg.evolution, strategy,
            background_init=cfg.background_init,
            dilation_radius=cfg.dilation_radius,
            prior_mask=prior_mask,
        )

    if jobs > 1 and len(saliencies) > 1:
        # the evolution loop holds the GIL, so levels parallelize across
        # processes; fall back to threads where fork is unavailable
        try:
            mp_ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp_ctx) as pool:
                results = list(pool.map(
                    _run_level_args,
                    [(sal, guide, cfg, strategy, prior_mask) for sal in saliencies],
                ))
        except ValueError:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(one_level, saliencies))
    else:
        results = [one_level(s) for s in saliencies]
    probs = [r[0] for r in results]
    masks = [r[1] for r in results]
    meta = [r[2] for r in results]
    out = {"saliencies": saliencies, "probs": probs, "masks": masks, "ca_meta": meta}
    if merge_net is not None:
        evolved = [m.astype(np.float64) for m in masks]
        out["merged"] = merge.merge_forward(merge_net, img, evolved)
    return out


def _persist_inference(out_dir: Path, image_id: str, result: dict, elapsed: float,
                       budget: float | None) -> None:
    img_dir = out_dir / image_id
    img_dir.mkdir(parents=True, exist_ok=True)
    for l, sal in enumerate(result["saliencies"], start=1):
        imagery.write_image(img_dir / f"level{l}_saliency.png", sal)
    for l, prob in enumerate(result["probs"], start=1):
        imagery.write_image(img_dir / f"level{l}_prob.png", prob, bit_depth=16)
    for l, mask in enumerate(result["masks"], start=1):
        imagery.write_mask(img_dir / f"level{l}_mask.png", mask)
    if "merged" in result:
        imagery.write_image(img_dir / "merged.png", result["merged"])
    meta = {
        "image_id": image_id,
        "levels": result["ca_meta"],
        "wall_time_s": elapsed,
        "budget_s": budget,
        "budget_exceeded": bool(budget is not None and elapsed > budget),
    }
    (img_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def cmd_infer(manifest: Manifest, model_path, cfg: PipelineConfig, split: str,
              out_dir, merge_model_path=None, jobs: int = 1) -> dict:
    """Run inference for every image in the split, persisting the artifact tree."""
    model = flim.load_model(model_path)
    merge_net = None
    if merge_model_path is not None and Path(merge_model_path).exists():
        merge_net = merge.load_net(merge_model_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    budget = cfg.time_budget_s
    report = {"images": [], "budget_violations": [], "merge_applied": merge_net is not None}
    for image_id in manifest.split_ids(split):
        img = _load_image(manifest, image_id)
        prior = _load_prior_mask(manifest, image_id)
        start = time.perf_counter()
        result = infer_image(img, model, cfg, prior_mask=prior, merge_net=merge_net, jobs=jobs)
        elapsed = time.perf_counter() - start
        _persist_inference(out_dir, image_id, result, elapsed, budget)
        report["images"].append({"image_id": image_id, "wall_time_s": elapsed})
        if budget is not None and elapsed > budget:
            report["budget_violations"].append(image_id)
    (out_dir / "run.json").write_text(json.dumps(report, indent=2))
    return report


def build_train_samples(manifest: Manifest, model: flim.EncoderModel,
                        cfg: PipelineConfig, split: str = "train",
                        jobs: int = 1) -> list[merge.TrainSample]:
    samples = []
    for image_id in manifest.split_ids(split):
        gt = _load_gt(manifest, image_id)
        if gt is None:
            raise DataError(f"train image {image_id!r} lacks a ground truth")
        img = _load_image(manifest, image_id)
        prior = _load_prior_mask(manifest, image_id)
        result = infer_image(img, model, cfg, prior_mask=prior, jobs=jobs)
        evolved = [m.astype(np.float64) for m in result["masks"]]
        samples.append(merge.TrainSample(imagery.as_channels(img), evolved, gt))
    return samples


def cmd_train_merge(manifest: Manifest, model_path, cfg: PipelineConfig,
                    out_path, jobs: int = 1) -> list[float]:
    """Train the merge network on the train split; write model + loss CSV."""
    model = flim.load_model(model_path)
    samples = build_train_samples(manifest, model, cfg, jobs=jobs)
    net, losses = merge.train(samples, cfg.merge_train)
    merge.save_net(out_path, net, cfg.merge_train, losses[-1])
    csv_path = Path(str(out_path) + ".loss.csv")
    with open(csv_path, "w") as f:
        f.write("epoch,lr,loss\n")
        for epoch, loss in enumerate(losses):
            f.write(f"{epoch},{merge.cosine_lr(epoch, cfg.merge_train)},{loss}\n")
    return losses


def cmd_evaluate(manifest: Manifest, pred_dir, split: str,
                 params: metrics.MetricParams, out_prefix,
                 stage: str = "merged") -> metrics.MetricReport:
    """Score persisted predictions against manifest ground truths."""
    pred_dir = Path(pred_dir)
    pairs = []
    skipped = []
    for image_id in manifest.split_ids(split):
        gt = _load_gt(manifest, image_id)
        if gt is None:
            skipped.append(image_id)
            continue
        if stage == "merged":
            pred_path = pred_dir / image_id / "merged.png"
        else:
            pred_path = pred_dir / image_id / f"{stage}_mask.png"
        if not pred_path.exists():
            skipped.append(image_id)
            continue
        pred = imagery.read_image(pred_path)
        if pred.ndim == 3:
            pred = pred.mean(axis=2)
        pairs.append((image_id, pred, gt))
    if skipped:
        print(f"warning: skipped {len(skipped)} images without predictions or gt: {skipped[:5]}")
    report = metrics.evaluate_split(pairs, params)
    report.write_csv(str(out_prefix) + ".csv")
    report.write_json(str(out_prefix) + ".json")
    return report


def cmd_synth(out_dir, count: int, seed: int, kind: str = "parasite",
              size: int = 256) -> dict:
    return synth.generate_dataset(out_dir, count, seed, kind=kind, size=size)
