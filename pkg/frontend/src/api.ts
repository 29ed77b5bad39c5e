/** Thin typed client for the design service; all math stays server-side. */

import type {
  CanvasMarker,
  ImageListResponse,
  JobStatus,
  MetricsResponse,
  OverlayStage,
} from "./types.js";

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function toJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = (await res.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body: keep the status text
    }
    throw new ApiError(res.status, detail);
  }
  return (await res.json()) as T;
}

export class ApiClient {
  constructor(
    private readonly base: string,
    private readonly fetchImpl: FetchLike = (input, init) =>
      fetch(input, init),
  ) {}

  async createSession(
    manifest: string,
    architecture: string,
    seed = 0,
  ): Promise<string> {
    const res = await this.fetchImpl(`${this.base}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ manifest, architecture, seed }),
    });
    const body = await toJson<{ session_id: string }>(res);
    return body.session_id;
  }

  async listImages(
    sessionId: string,
    metric = "dice",
  ): Promise<ImageListResponse> {
    const res = await this.fetchImpl(
      `${this.base}/sessions/${sessionId}/images?sort=worst&metric=${metric}`,
    );
    return toJson<ImageListResponse>(res);
  }

  rawImageUrl(sessionId: string, imageId: string, maxSide?: number): string {
    const suffix = maxSide === undefined ? "" : `?max_side=${maxSide}`;
    return `${this.base}/sessions/${sessionId}/images/${imageId}/raw${suffix}`;
  }

  overlayUrl(
    sessionId: string,
    imageId: string,
    layer: number,
    stage: OverlayStage,
  ): string {
    return `${this.base}/sessions/${sessionId}/images/${imageId}/saliency/${layer}?stage=${stage}`;
  }

  async getMarkers(
    sessionId: string,
    imageId: string,
  ): Promise<CanvasMarker[]> {
    const res = await this.fetchImpl(
      `${this.base}/sessions/${sessionId}/images/${imageId}/markers`,
    );
    const body = await toJson<{ markers: CanvasMarker[] }>(res);
    return body.markers;
  }

  async putMarkers(
    sessionId: string,
    imageId: string,
    markers: readonly CanvasMarker[],
  ): Promise<number> {
    const res = await this.fetchImpl(
      `${this.base}/sessions/${sessionId}/images/${imageId}/markers`,
      {
        method: "PUT",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ markers }),
      },
    );
    const body = await toJson<{ revision: number }>(res);
    return body.revision;
  }

  async startTraining(sessionId: string): Promise<string> {
    const res = await this.fetchImpl(
      `${this.base}/sessions/${sessionId}/train`,
      { method: "POST" },
    );
    const body = await toJson<{ job_id: string }>(res);
    return body.job_id;
  }

  async jobStatus(jobId: string): Promise<JobStatus> {
    const res = await this.fetchImpl(`${this.base}/jobs/${jobId}`);
    return toJson<JobStatus>(res);
  }

  /** Poll a train job once per interval until it leaves the running state. */
  async waitForJob(
    jobId: string,
    intervalMs = 1000,
    onProgress?: (status: JobStatus) => void,
    sleep: (ms: number) => Promise<void> = (ms) =>
      new Promise((resolve) => setTimeout(resolve, ms)),
  ): Promise<JobStatus> {
    for (;;) {
      const status = await this.jobStatus(jobId);
      onProgress?.(status);
      if (status.status !== "running") return status;
      await sleep(intervalMs);
    }
  }

  async metricHistory(sessionId: string): Promise<MetricsResponse> {
    const res = await this.fetchImpl(
      `${this.base}/sessions/${sessionId}/metrics`,
    );
    return toJson<MetricsResponse>(res);
  }
}
