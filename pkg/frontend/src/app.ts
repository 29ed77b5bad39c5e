/** DOM wiring for the marker-design studio.
 *
 * Render-and-dispatch only: every number shown here comes from the service.
 * Markers are stored in image space; the canvas applies ViewTransform and
 * the device pixel ratio at draw time only.
 */

import { ApiClient } from "./api.js";
import { MarkerStore } from "./markers.js";
import type {
  HistoryPoint,
  ImageRow,
  MarkerLabel,
  OverlayStage,
} from "./types.js";
import { ViewTransform } from "./view.js";

const MARKER_COLORS: Record<MarkerLabel, string> = {
  fg: "rgba(220, 40, 40, 0.9)",
  bg: "rgba(245, 245, 245, 0.9)",
};

interface AppState {
  sessionId: string;
  images: ImageRow[];
  currentImage: string | null;
  image: HTMLImageElement | null;
  overlay: HTMLImageElement | null;
  layer: number;
  numLayers: number;
  stage: OverlayStage;
  overlayOpacity: number;
  label: MarkerLabel;
  radius: number;
  training: boolean;
  metric: string;
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = url;
  });
}

export async function startApp(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? "";
  const api = new ApiClient(base);
  const store = new MarkerStore();
  const view = new ViewTransform();

  const state: AppState = {
    sessionId: params.get("session") ?? "",
    images: [],
    currentImage: null,
    image: null,
    overlay: null,
    layer: 0,
    numLayers: 0,
    stage: "flim",
    overlayOpacity: 0.5,
    label: "fg",
    radius: 3,
    training: false,
    metric: "dice",
  };
  if (!state.sessionId) {
    const manifest = params.get("manifest");
    const architecture = params.get("architecture");
    if (!manifest || !architecture) {
      showError("pass ?session=... or ?manifest=...&architecture=...");
      return;
    }
    state.sessionId = await api.createSession(manifest, architecture);
  }

  const canvas = el<HTMLCanvasElement>("canvas");
  const maybeCtx = canvas.getContext("2d");
  if (!maybeCtx) throw new Error("2d canvas unsupported");
  const ctx: CanvasRenderingContext2D = maybeCtx;

  function showError(message: string): void {
    const bar = el<HTMLDivElement>("error-bar");
    bar.textContent = message;
    bar.style.display = message ? "block" : "none";
  }

  function resizeCanvas(): void {
    const dpr = window.devicePixelRatio || 1;
    const rect = canvas.getBoundingClientRect();
    canvas.width = Math.round(rect.width * dpr);
    canvas.height = Math.round(rect.height * dpr);
    draw();
  }

  function draw(): void {
    const dpr = window.devicePixelRatio || 1;
    ctx.save();
    ctx.setTransform(dpr, 0, 0, dpr, 0, 0);
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.imageSmoothingEnabled = view.scale < 4;
    if (state.image) {
      ctx.drawImage(
        state.image,
        view.offsetX,
        view.offsetY,
        state.image.naturalWidth * view.scale,
        state.image.naturalHeight * view.scale,
      );
    }
    if (state.overlay) {
      ctx.globalAlpha = state.overlayOpacity;
      ctx.drawImage(
        state.overlay,
        view.offsetX,
        view.offsetY,
        (state.image?.naturalWidth ?? state.overlay.naturalWidth) * view.scale,
        (state.image?.naturalHeight ?? state.overlay.naturalHeight) *
          view.scale,
      );
      ctx.globalAlpha = 1;
    }
    for (const m of store.list()) {
      const c = view.imageToScreen({ x: m.x, y: m.y });
      ctx.beginPath();
      ctx.arc(c.x, c.y, Math.max(2, m.radius * view.scale), 0, 2 * Math.PI);
      ctx.fillStyle = MARKER_COLORS[m.label];
      ctx.fill();
      ctx.strokeStyle = "rgba(0,0,0,0.6)";
      ctx.stroke();
    }
    ctx.restore();
    el<HTMLSpanElement>("dirty-flag").textContent = store.isDirty()
      ? "unsaved markers"
      : "";
  }

  async function refreshGallery(): Promise<void> {
    const body = await api.listImages(state.sessionId, state.metric);
    state.images = body.images;
    const list = el<HTMLUListElement>("gallery");
    list.innerHTML = "";
    for (const row of body.images) {
      const item = document.createElement("li");
      item.className = row.image_id === state.currentImage ? "selected" : "";
      const thumb = document.createElement("img");
      thumb.src = `${base}${row.thumbnail_url}`;
      thumb.alt = row.image_id;
      const caption = document.createElement("span");
      const score = row.score === null ? "–" : row.score.toFixed(3);
      caption.textContent = `${row.image_id}  ${row.metric}=${score}  (${row.marker_count} markers)`;
      item.append(thumb, caption);
      item.addEventListener("click", () => {
        void selectImage(row.image_id);
      });
      list.appendChild(item);
    }
    const layers = body.images.find((r) => r.per_layer)?.per_layer;
    if (layers) {
      state.numLayers = layers.length;
      renderLayerTabs();
    }
  }

  function renderLayerTabs(): void {
    const tabs = el<HTMLDivElement>("layer-tabs");
    tabs.innerHTML = "";
    for (let l = 1; l <= state.numLayers; l += 1) {
      const tab = document.createElement("button");
      tab.textContent = `layer ${l}`;
      tab.className = state.layer === l ? "active" : "";
      tab.addEventListener("click", () => {
        state.layer = l;
        renderLayerTabs();
        void refreshOverlay();
      });
      tabs.appendChild(tab);
    }
  }

  async function refreshOverlay(): Promise<void> {
    if (!state.currentImage || state.layer === 0) {
      state.overlay = null;
      draw();
      return;
    }
    try {
      state.overlay = await loadImage(
        api.overlayUrl(
          state.sessionId,
          state.currentImage,
          state.layer,
          state.stage,
        ),
      );
    } catch {
      state.overlay = null; // no trained model yet
    }
    draw();
  }

  async function selectImage(imageId: string): Promise<void> {
    if (
      store.isDirty() &&
      !window.confirm("Discard unsaved markers on this image?")
    ) {
      return;
    }
    state.currentImage = imageId;
    state.image = await loadImage(api.rawImageUrl(state.sessionId, imageId));
    const rect = canvas.getBoundingClientRect();
    view.fit(
      state.image.naturalWidth,
      state.image.naturalHeight,
      rect.width,
      rect.height,
    );
    store.load(await api.getMarkers(state.sessionId, imageId));
    await refreshOverlay();
    await refreshGallery();
    draw();
  }

  function canvasPoint(event: MouseEvent): { x: number; y: number } {
    const rect = canvas.getBoundingClientRect();
    return { x: event.clientX - rect.left, y: event.clientY - rect.top };
  }

  canvas.addEventListener("click", (event) => {
    if (!state.image || !state.currentImage) return;
    const p = view.screenToImage(canvasPoint(event));
    if (
      p.x < 0 ||
      p.y < 0 ||
      p.x >= state.image.naturalWidth ||
      p.y >= state.image.naturalHeight
    ) {
      return;
    }
    if (event.shiftKey) {
      store.eraseAt(p.x, p.y);
    } else {
      store.add({ x: p.x, y: p.y, radius: state.radius, label: state.label });
    }
    draw();
  });

  canvas.addEventListener("wheel", (event) => {
    event.preventDefault();
    view.zoomAt(canvasPoint(event), event.deltaY < 0 ? 1.2 : 1 / 1.2);
    draw();
  });

  let panning: { x: number; y: number } | null = null;
  canvas.addEventListener("mousedown", (event) => {
    if (event.button === 1 || event.altKey) {
      panning = canvasPoint(event);
      event.preventDefault();
    }
  });
  canvas.addEventListener("mousemove", (event) => {
    if (!panning) return;
    const p = canvasPoint(event);
    view.panBy(p.x - panning.x, p.y - panning.y);
    panning = p;
    draw();
  });
  window.addEventListener("mouseup", () => {
    panning = null;
  });

  el<HTMLSelectElement>("label-select").addEventListener("change", (event) => {
    state.label = (event.target as HTMLSelectElement).value as MarkerLabel;
  });
  const radiusInput = el<HTMLInputElement>("radius-input");
  radiusInput.value = String(state.radius);
  radiusInput.addEventListener("input", () => {
    state.radius = Math.max(0, Number(radiusInput.value) || 0);
  });

  el<HTMLButtonElement>("undo-btn").addEventListener("click", () => {
    store.undo();
    draw();
  });
  el<HTMLButtonElement>("redo-btn").addEventListener("click", () => {
    store.redo();
    draw();
  });
  window.addEventListener("keydown", (event) => {
    if (event.ctrlKey && event.key === "z") {
      if (event.shiftKey) store.redo();
      else store.undo();
      draw();
    }
  });

  el<HTMLButtonElement>("save-btn").addEventListener("click", () => {
    void (async () => {
      if (!state.currentImage) return;
      try {
        await api.putMarkers(
          state.sessionId,
          state.currentImage,
          store.list(),
        );
        store.markSaved();
        showError("");
        await refreshGallery();
      } catch (err) {
        showError(String(err));
      }
      draw();
    })();
  });

  el<HTMLButtonElement>("train-btn").addEventListener("click", () => {
    void (async () => {
      if (state.training) return;
      state.training = true;
      const progress = el<HTMLSpanElement>("train-progress");
      try {
        const jobId = await api.startTraining(state.sessionId);
        const status = await api.waitForJob(jobId, 1000, (s) => {
          progress.textContent = `${s.status}: ${s.progress}`;
        });
        if (status.status === "error") {
          showError(status.error);
        } else {
          showError("");
          await refreshGallery();
          await refreshOverlay();
          await refreshMetricsPanel();
        }
      } catch (err) {
        showError(String(err));
      } finally {
        state.training = false;
        progress.textContent = "";
      }
    })();
  });

  const stageToggle = el<HTMLSelectElement>("stage-select");
  stageToggle.addEventListener("change", () => {
    state.stage = stageToggle.value as OverlayStage;
    void refreshOverlay();
  });
  const opacityInput = el<HTMLInputElement>("opacity-input");
  opacityInput.addEventListener("input", () => {
    state.overlayOpacity = Number(opacityInput.value) / 100;
    draw();
  });
  const metricSelect = el<HTMLSelectElement>("metric-select");
  metricSelect.addEventListener("change", () => {
    state.metric = metricSelect.value;
    void refreshGallery();
  });

  async function refreshMetricsPanel(): Promise<void> {
    const body = await api.metricHistory(state.sessionId);
    drawHistory(el<HTMLCanvasElement>("metrics-canvas"), body.history, "dice");
  }

  window.addEventListener("beforeunload", (event) => {
    if (store.isDirty()) {
      event.preventDefault();
    }
  });
  window.addEventListener("resize", resizeCanvas);

  await refreshGallery();
  if (state.images.length > 0) {
    const first = state.images[0];
    if (first) await selectImage(first.image_id);
  }
  resizeCanvas();
}

/** Plot one polyline per layer of the chosen metric across revisions. */
export function drawHistory(
  canvas: HTMLCanvasElement,
  history: HistoryPoint[],
  metric: string,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (history.length === 0) return;
  const layers = history[0]?.per_layer.length ?? 0;
  const pad = 24;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad, w, h);
  for (let l = 0; l < layers; l += 1) {
    ctx.beginPath();
    ctx.strokeStyle = `hsl(${(l * 360) / Math.max(1, layers)}, 70%, 45%)`;
    history.forEach((point, i) => {
      const value = point.per_layer[l]?.[metric] ?? 0;
      const x = pad + (history.length === 1 ? 0 : (i / (history.length - 1)) * w);
      const y = pad + h - (value ?? 0) * h;
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
}
