/** Shared shapes mirroring the design service's HTTP contract. */

export type MarkerLabel = "fg" | "bg";

/** A marker disk stored in image-space pixels, never screen space. */
export interface CanvasMarker {
  x: number;
  y: number;
  radius: number;
  label: MarkerLabel;
}

export interface ImageRow {
  image_id: string;
  marker_count: number;
  metric: string;
  score: number | null;
  per_layer: Record<string, number>[] | null;
  raw_url: string;
  thumbnail_url: string;
}

export interface ImageListResponse {
  images: ImageRow[];
  revision: number;
}

export interface JobStatus {
  job_id: string;
  session_id: string;
  status: "running" | "done" | "error";
  progress: string;
  error: string;
}

export interface HistoryPoint {
  revision: number;
  per_layer: Record<string, number | null>[];
}

export interface MetricsResponse {
  revision: number;
  history: HistoryPoint[];
}

export type OverlayStage = "flim" | "ca";
