// Pan/zoom camera: world coordinates are meters, +y up; screen coordinates
// are canvas pixels, +y down. worldToScreen and screenToWorld are exact
// inverses (property-tested).

export interface Camera {
  centerX: number; // world point at the canvas center
  centerY: number;
  pixelsPerMeter: number;
}

export function makeCamera(): Camera {
  return { centerX: 0, centerY: 0, pixelsPerMeter: 60 };
}

export function worldToScreen(
  cam: Camera, w: number, h: number, x: number, y: number,
): [number, number] {
  return [
    w / 2 + (x - cam.centerX) * cam.pixelsPerMeter,
    h / 2 - (y - cam.centerY) * cam.pixelsPerMeter,
  ];
}

export function screenToWorld(
  cam: Camera, w: number, h: number, px: number, py: number,
): [number, number] {
  return [
    cam.centerX + (px - w / 2) / cam.pixelsPerMeter,
    cam.centerY - (py - h / 2) / cam.pixelsPerMeter,
  ];
}

export function panByPixels(cam: Camera, dxPx: number, dyPx: number): Camera {
  return {
    ...cam,
    centerX: cam.centerX - dxPx / cam.pixelsPerMeter,
    centerY: cam.centerY + dyPx / cam.pixelsPerMeter,
  };
}

/** Zoom about a fixed screen point so the world point under the cursor
 * stays put. */
export function zoomAt(
  cam: Camera, w: number, h: number, px: number, py: number, factor: number,
): Camera {
  const [wx, wy] = screenToWorld(cam, w, h, px, py);
  const scale = Math.min(Math.max(cam.pixelsPerMeter * factor, 5), 1000);
  const next = { ...cam, pixelsPerMeter: scale };
  // re-anchor: put (wx, wy) back under (px, py)
  const [nx, ny] = screenToWorld(next, w, h, px, py);
  return { ...next, centerX: next.centerX + (wx - nx), centerY: next.centerY + (wy - ny) };
}
