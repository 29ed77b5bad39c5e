"""HTTP backend for the interactive encoder-design loop.

Serves dataset images, accepts whole-list marker edits, retrains the encoder
in a background job, and exposes per-layer saliency overlays (pre- and
post-evolution) plus a per-revision metric history. All computation delegates
to the pipeline modules; the service only stores session state.
"""

from __future__ import annotations

import io
import threading
import uuid
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image as PILImage
from pydantic import BaseModel, Field

from . import ca, decoder, flim, imagery, metrics, pipeline

RANK_METRIC_DEFAULT = "dice"


class SessionCreate(BaseModel):
    manifest: str
    architecture: str
    config: Optional[str] = None
    seed: int = 0


class MarkerIn(BaseModel):
    x: int = Field(ge=0)
    y: int = Field(ge=0)
    radius: int = Field(ge=0)
    label: Literal["fg", "bg"]


class MarkerList(BaseModel):
    markers: list[MarkerIn]


@dataclass
class TrainJob:
    job_id: str
    session_id: str
    status: str = "running"  # running | done | error
    progress: str = "starting"
    error: str = ""


@dataclass
class Session:
    session_id: str
    manifest: pipeline.Manifest
    architecture_path: str
    config: pipeline.PipelineConfig
    seed: int
    markers: dict[str, list[flim.Marker]] = field(default_factory=dict)
    model: flim.EncoderModel | None = None
    # image_id -> list over layers of {"flim": saliency, "ca": probability}
    overlays: dict[str, list[dict]] = field(default_factory=dict)
    # image_id -> list over layers of metric rows
    image_metrics: dict[str, list[dict]] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    revision: int = 0
    active_job: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def _rgba_overlay(values: np.ndarray, color: tuple[int, int, int]) -> bytes:
    alpha = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = alpha.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    rgba[:, :, 0], rgba[:, :, 1], rgba[:, :, 2] = color
    rgba[:, :, 3] = alpha
    buf = io.BytesIO()
    PILImage.fromarray(rgba, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def _png_bytes(img: np.ndarray, max_side: int | None = None) -> bytes:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(data)
    if max_side is not None and max(pil.size) > max_side:
        pil.thumbnail((max_side, max_side))
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def _run_training(app: FastAPI, session: Session, job: TrainJob) -> None:
    try:
        markers = [m for ms in session.markers.values() for m in ms]
        job.progress = "training encoder"
        input_channels, specs = flim.load_architecture(session.architecture_path)
        image_ids = sorted({m.image_id for m in markers})
        images = {iid: imagery.read_image(session.manifest.path(iid, "image_path"))
                  for iid in image_ids}
        model = flim.train_encoder(images, markers, specs, input_channels,
                                   seed=session.seed)
        cfg = session.config
        overlays: dict[str, list[dict]] = {}
        image_metrics: dict[str, list[dict]] = {}
        all_ids = list(session.manifest.entries)
        for i, iid in enumerate(all_ids):
            job.progress = f"evaluating image {i + 1}/{len(all_ids)}"
            img = imagery.read_image(session.manifest.path(iid, "image_path"))
            prior_path = session.manifest.path(iid, "mask_path")
            prior = imagery.read_mask(prior_path) if prior_path and prior_path.exists() else None
            result = pipeline.infer_image(img, model, cfg, prior_mask=prior)
            overlays[iid] = [
                {"flim": sal, "ca": prob, "mask": mask}
                for sal, prob, mask in zip(result["saliencies"], result["probs"],
                                           result["masks"])
            ]
            gt_path = session.manifest.path(iid, "gt_path")
            if gt_path and gt_path.exists():
                gt = imagery.read_mask(gt_path)
                image_metrics[iid] = [
                    metrics.evaluate_pair(mask.astype(np.float64), gt, cfg.metric_params)
                    for mask in result["masks"]
                ]
        num_layers = len(model.layers)
        per_layer = []
        for layer in range(num_layers):
            rows = [m[layer] for m in image_metrics.values()]
            per_layer.append({
                name: float(np.mean([r[name] for r in rows])) if rows else None
                for name in metrics.METRIC_NAMES
            })
        # atomic swap: nothing above touched the visible session state
        with session.lock:
            session.model = model
            session.overlays = overlays
            session.image_metrics = image_metrics
            session.revision += 1
            session.history.append({"revision": session.revision, "per_layer": per_layer})
            session.active_job = None
        job.status = "done"
        job.progress = "complete"
    except Exception as e:  # surfaced through GET /jobs/{id}
        with session.lock:
            session.active_job = None
        job.status = "error"
        job.error = str(e)


def create_app() -> FastAPI:
    app = FastAPI(title="flimca design service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )
    sessions: dict[str, Session] = {}
    jobs: dict[str, TrainJob] = {}
    app.state.sessions = sessions
    app.state.jobs = jobs

    def get_session(session_id: str) -> Session:
        if session_id not in sessions:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return sessions[session_id]

    def get_entry(session: Session, image_id: str) -> dict:
        if image_id not in session.manifest.entries:
            raise HTTPException(404, f"unknown image {image_id!r}")
        return session.manifest.entries[image_id]

    @app.post("/sessions", status_code=201)
    def create_session(body: SessionCreate):
        try:
            manifest = pipeline.load_manifest(body.manifest)
            cfg = pipeline.load_config(body.config) if body.config else pipeline.PipelineConfig()
            flim.load_architecture(body.architecture)
        except (pipeline.DataError, pipeline.ConfigError, OSError, ValueError) as e:
            raise HTTPException(422, str(e)) from e
        session_id = uuid.uuid4().hex[:12]
        sessions[session_id] = Session(
            session_id=session_id, manifest=manifest,
            architecture_path=body.architecture, config=cfg, seed=body.seed,
        )
        return {"session_id": session_id, "image_count": len(manifest.entries)}

    @app.get("/sessions/{session_id}/images")
    def list_images(session_id: str,
                    sort: str = Query("worst"),
                    metric: str = Query(RANK_METRIC_DEFAULT)):
        session = get_session(session_id)
        if metric not in metrics.METRIC_NAMES:
            raise HTTPException(422, f"unknown metric {metric!r}")
        rows = []
        with session.lock:
            for iid in session.manifest.entries:
                layer_metrics = session.image_metrics.get(iid)
                score = layer_metrics[-1][metric] if layer_metrics else None
                rows.append({
                    "image_id": iid,
                    "marker_count": len(session.markers.get(iid, [])),
                    "metric": metric,
                    "score": score,
                    "per_layer": layer_metrics,
                    "raw_url": f"/sessions/{session_id}/images/{iid}/raw",
                    "thumbnail_url": f"/sessions/{session_id}/images/{iid}/raw?max_side=128",
                })
        if sort == "worst":
            missing = [r for r in rows if r["score"] is None]
            scored = sorted((r for r in rows if r["score"] is not None),
                            key=lambda r: r["score"])
            if metric == "mae":  # higher is worse
                scored.reverse()
            rows = scored + missing
        return {"images": rows, "revision": session.revision}

    @app.get("/sessions/{session_id}/images/{image_id}/raw")
    def raw_image(session_id: str, image_id: str, max_side: int | None = None):
        session = get_session(session_id)
        get_entry(session, image_id)
        img = imagery.read_image(session.manifest.path(image_id, "image_path"))
        return Response(content=_png_bytes(img, max_side), media_type="image/png")

    @app.put("/sessions/{session_id}/images/{image_id}/markers")
    def put_markers(session_id: str, image_id: str, body: MarkerList):
        session = get_session(session_id)
        get_entry(session, image_id)
        img = imagery.read_image(session.manifest.path(image_id, "image_path"))
        h, w = img.shape[:2]
        for m in body.markers:
            if not (m.x < w and m.y < h):
                raise HTTPException(422, f"marker ({m.x}, {m.y}) outside {h}x{w} image")
        with session.lock:
            session.markers[image_id] = [
                flim.Marker(image_id, m.x, m.y, m.radius, m.label) for m in body.markers
            ]
            session.revision += 1
        return {"image_id": image_id, "marker_count": len(body.markers),
                "revision": session.revision}

    @app.get("/sessions/{session_id}/images/{image_id}/markers")
    def get_markers(session_id: str, image_id: str):
        session = get_session(session_id)
        get_entry(session, image_id)
        with session.lock:
            ms = session.markers.get(image_id, [])
            return {"markers": [
                {"x": m.x, "y": m.y, "radius": m.radius, "label": m.label} for m in ms
            ]}

    @app.post("/sessions/{session_id}/train", status_code=202)
    def train(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if session.active_job is not None:
                raise HTTPException(409, "a train job is already running")
            if not any(session.markers.values()):
                raise HTTPException(422, "cannot train: no markers placed")
            job = TrainJob(job_id=uuid.uuid4().hex[:12], session_id=session_id)
            jobs[job.job_id] = job
            session.active_job = job.job_id
        thread = threading.Thread(target=_run_training, args=(app, session, job),
                                  daemon=True)
        thread.start()
        return {"job_id": job.job_id}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        if job_id not in jobs:
            raise HTTPException(404, f"unknown job {job_id!r}")
        job = jobs[job_id]
        return {"job_id": job.job_id, "session_id": job.session_id,
                "status": job.status, "progress": job.progress, "error": job.error}

    @app.get("/sessions/{session_id}/images/{image_id}/saliency/{layer}")
    def saliency_overlay(session_id: str, image_id: str, layer: int,
                         stage: str = Query("flim")):
        session = get_session(session_id)
        get_entry(session, image_id)
        if stage not in ("flim", "ca"):
            raise HTTPException(422, f"unknown stage {stage!r}")
        with session.lock:
            layers = session.overlays.get(image_id)
        if layers is None:
            raise HTTPException(404, "no trained model for this session yet")
        if not (1 <= layer <= len(layers)):
            raise HTTPException(404, f"layer {layer} out of range 1..{len(layers)}")
        values = layers[layer - 1][stage]
        color = (255, 32, 32) if stage == "flim" else (32, 128, 255)
        return Response(content=_rgba_overlay(values, color), media_type="image/png")

    @app.get("/sessions/{session_id}/metrics")
    def metric_history(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return {"revision": session.revision, "history": session.history}

    return app
