/** Zoom/pan transform between image space and screen space.
 *
 * Markers live in integer image coordinates; the transform must therefore
 * round-trip integer pixels exactly for any zoom and pan, which holds
 * because screenToImage floors into the pixel grid that imageToScreen maps
 * pixel centers out of.
 */

export interface Point {
  x: number;
  y: number;
}

export class ViewTransform {
  /** Scale in screen px per image px. */
  scale = 1;
  /** Screen position of the image origin. */
  offsetX = 0;
  offsetY = 0;

  constructor(scale = 1, offsetX = 0, offsetY = 0) {
    this.scale = scale;
    this.offsetX = offsetX;
    this.offsetY = offsetY;
  }

  /** Screen position of an image pixel's center. */
  imageToScreen(p: Point): Point {
    return {
      x: this.offsetX + (p.x + 0.5) * this.scale,
      y: this.offsetY + (p.y + 0.5) * this.scale,
    };
  }

  /** Image pixel containing a screen position. */
  screenToImage(p: Point): Point {
    return {
      x: Math.floor((p.x - this.offsetX) / this.scale),
      y: Math.floor((p.y - this.offsetY) / this.scale),
    };
  }

  /** Zoom by a factor while keeping the given screen point fixed. */
  zoomAt(screen: Point, factor: number): void {
    const next = Math.min(64, Math.max(1 / 16, this.scale * factor));
    const applied = next / this.scale;
    this.offsetX = screen.x - (screen.x - this.offsetX) * applied;
    this.offsetY = screen.y - (screen.y - this.offsetY) * applied;
    this.scale = next;
  }

  panBy(dx: number, dy: number): void {
    this.offsetX += dx;
    this.offsetY += dy;
  }

  /** Fit an image into a viewport, centered, without upscaling past 1:1. */
  fit(imageW: number, imageH: number, viewW: number, viewH: number): void {
    this.scale = Math.min(viewW / imageW, viewH / imageH);
    this.offsetX = (viewW - imageW * this.scale) / 2;
    this.offsetY = (viewH - imageH * this.scale) / 2;
  }
}
