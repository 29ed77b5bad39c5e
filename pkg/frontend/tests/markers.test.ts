import { describe, expect, it } from "vitest";

import { MarkerStore } from "../src/markers.js";
import type { CanvasMarker } from "../src/types.js";

const m = (x: number, y: number, label: "fg" | "bg" = "fg"): CanvasMarker => ({
  x,
  y,
  radius: 3,
  label,
});

describe("MarkerStore", () => {
  it("adds markers in order", () => {
    const store = new MarkerStore();
    store.add(m(1, 2));
    store.add(m(3, 4, "bg"));
    expect(store.list()).toEqual([m(1, 2), m(3, 4, "bg")]);
  });

  it("undo/redo walk the edit history", () => {
    const store = new MarkerStore();
    store.add(m(1, 1));
    store.add(m(2, 2));
    expect(store.undo()).toBe(true);
    expect(store.list()).toEqual([m(1, 1)]);
    expect(store.redo()).toBe(true);
    expect(store.list()).toEqual([m(1, 1), m(2, 2)]);
    expect(store.undo()).toBe(true);
    expect(store.undo()).toBe(true);
    expect(store.list()).toEqual([]);
    expect(store.undo()).toBe(false);
  });

  it("a new edit clears the redo stack", () => {
    const store = new MarkerStore();
    store.add(m(1, 1));
    store.undo();
    store.add(m(9, 9));
    expect(store.redo()).toBe(false);
    expect(store.list()).toEqual([m(9, 9)]);
  });

  it("erases the nearest marker within its radius", () => {
    const store = new MarkerStore();
    store.add(m(10, 10));
    store.add(m(20, 20));
    expect(store.eraseAt(11, 11)).toBe(true);
    expect(store.list()).toEqual([m(20, 20)]);
    expect(store.eraseAt(100, 100)).toBe(false);
  });

  it("tracks dirtiness against the last saved snapshot", () => {
    const store = new MarkerStore();
    store.load([m(1, 1)]);
    expect(store.isDirty()).toBe(false);
    store.add(m(2, 2));
    expect(store.isDirty()).toBe(true);
    store.markSaved();
    expect(store.isDirty()).toBe(false);
    store.undo();
    expect(store.isDirty()).toBe(true);
  });

  it("load resets history", () => {
    const store = new MarkerStore();
    store.add(m(1, 1));
    store.load([m(5, 5)]);
    expect(store.undo()).toBe(false);
    expect(store.list()).toEqual([m(5, 5)]);
  });
});
