/** Marker editing state with undo/redo and a dirty flag for the save guard. */

import type { CanvasMarker } from "./types.js";

export class MarkerStore {
  private markers: CanvasMarker[] = [];
  private undoStack: CanvasMarker[][] = [];
  private redoStack: CanvasMarker[][] = [];
  private savedSnapshot = "[]";

  /** Markers in image coordinates, in placement order. */
  list(): readonly CanvasMarker[] {
    return this.markers;
  }

  private snapshot(): void {
    this.undoStack.push(this.markers.map((m) => ({ ...m })));
    this.redoStack = [];
  }

  add(marker: CanvasMarker): void {
    this.snapshot();
    this.markers.push({ ...marker });
  }

  /** Remove the marker nearest to (x, y) within its own radius, if any. */
  eraseAt(x: number, y: number): boolean {
    let bestIdx = -1;
    let bestD = Infinity;
    this.markers.forEach((m, i) => {
      const d = Math.hypot(m.x - x, m.y - y);
      if (d <= m.radius + 1 && d < bestD) {
        bestD = d;
        bestIdx = i;
      }
    });
    if (bestIdx < 0) return false;
    this.snapshot();
    this.markers.splice(bestIdx, 1);
    return true;
  }

  clear(): void {
    if (this.markers.length === 0) return;
    this.snapshot();
    this.markers = [];
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (prev === undefined) return false;
    this.redoStack.push(this.markers);
    this.markers = prev;
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (next === undefined) return false;
    this.undoStack.push(this.markers);
    this.markers = next;
    return true;
  }

  /** Replace contents from the server and reset history + dirty state. */
  load(markers: CanvasMarker[]): void {
    this.markers = markers.map((m) => ({ ...m }));
    this.undoStack = [];
    this.redoStack = [];
    this.savedSnapshot = JSON.stringify(this.markers);
  }

  markSaved(): void {
    this.savedSnapshot = JSON.stringify(this.markers);
  }

  /** True when the current markers differ from the last saved/loaded set. */
  isDirty(): boolean {
    return JSON.stringify(this.markers) !== this.savedSnapshot;
  }
}
