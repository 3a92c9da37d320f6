// Top-down canvas renderer. Pure view: every pose comes from a frame
// message; the client never simulates.

import { Camera, worldToScreen } from "./camera.js";
import { FrameMessage } from "./protocol.js";

export const TRAIL_LENGTH = 90;

export class Scene {
  camera: Camera;
  trail: Array<[number, number]> = [];

  constructor(camera: Camera) {
    this.camera = camera;
  }

  pushFrame(frame: FrameMessage): void {
    this.trail.push([frame.state.pos[0], frame.state.pos[1]]);
    if (this.trail.length > TRAIL_LENGTH) this.trail.splice(0, this.trail.length - TRAIL_LENGTH);
  }

  reset(): void {
    this.trail = [];
  }

  render(
    ctx: CanvasRenderingContext2D,
    w: number,
    h: number,
    frame: FrameMessage | null,
    goal: [number, number] | null,
    velocity: [number, number] | null,
    paused: boolean,
  ): void {
    ctx.clearRect(0, 0, w, h);
    this.grid(ctx, w, h);
    if (goal) this.goalMarker(ctx, w, h, goal);
    if (frame) {
      this.trailPath(ctx, w, h);
      if (frame.guidance && frame.guidance["kind"] === "obstacle") {
        const c = frame.guidance["center"] as [number, number] | undefined;
        const r = frame.guidance["radius"] as number | undefined;
        if (c && r) this.obstacle(ctx, w, h, c, r);
      }
      this.character(ctx, w, h, frame);
      if (velocity) this.velocityArrow(ctx, w, h, frame.state.pos, velocity);
    }
    if (paused) this.badge(ctx, "paused");
  }

  private grid(ctx: CanvasRenderingContext2D, w: number, h: number): void {
    ctx.strokeStyle = "#2a2f36";
    ctx.lineWidth = 1;
    const ppm = this.camera.pixelsPerMeter;
    const [ox, oy] = worldToScreen(this.camera, w, h, 0, 0);
    for (let x = ox % ppm; x < w; x += ppm) {
      ctx.beginPath(); ctx.moveTo(x, 0); ctx.lineTo(x, h); ctx.stroke();
    }
    for (let y = oy % ppm; y < h; y += ppm) {
      ctx.beginPath(); ctx.moveTo(0, y); ctx.lineTo(w, y); ctx.stroke();
    }
  }

  private trailPath(ctx: CanvasRenderingContext2D, w: number, h: number): void {
    if (this.trail.length < 2) return;
    ctx.strokeStyle = "#4a90d9";
    ctx.lineWidth = 2;
    ctx.beginPath();
    this.trail.forEach(([x, y], i) => {
      const [px, py] = worldToScreen(this.camera, w, h, x, y);
      if (i === 0) ctx.moveTo(px, py); else ctx.lineTo(px, py);
    });
    ctx.stroke();
  }

  private character(ctx: CanvasRenderingContext2D, w: number, h: number, frame: FrameMessage): void {
    const { pos, heading, q } = frame.state;
    const [px, py] = worldToScreen(this.camera, w, h, pos[0], pos[1]);
    const ppm = this.camera.pixelsPerMeter;
    const r = 0.18 * ppm;
    ctx.fillStyle = "#e8b84b";
    ctx.beginPath();
    ctx.arc(px, py, r, 0, 2 * Math.PI);
    ctx.fill();
    // heading spike (+y world is up, canvas y is down)
    ctx.strokeStyle = "#e8b84b";
    ctx.lineWidth = 3;
    ctx.beginPath();
    ctx.moveTo(px, py);
    ctx.lineTo(px + heading[0] * 2 * r, py - heading[1] * 2 * r);
    ctx.stroke();
    // gait-joint ticks either side of the body
    ctx.strokeStyle = "#d1684e";
    ctx.lineWidth = 2;
    const side: [number, number] = [heading[1], -heading[0]];
    for (let j = 0; j < Math.min(2, q.length); j++) {
      const s = j === 0 ? 1 : -1;
      const bx = px + s * side[0] * r * 0.9;
      const by = py - s * side[1] * r * 0.9;
      const ang = q[j];
      const dir: [number, number] = [
        heading[0] * Math.cos(ang) - heading[1] * Math.sin(ang),
        heading[0] * Math.sin(ang) + heading[1] * Math.cos(ang),
      ];
      ctx.beginPath();
      ctx.moveTo(bx, by);
      ctx.lineTo(bx + dir[0] * r, by - dir[1] * r);
      ctx.stroke();
    }
  }

  private goalMarker(ctx: CanvasRenderingContext2D, w: number, h: number, goal: [number, number]): void {
    const [px, py] = worldToScreen(this.camera, w, h, goal[0], goal[1]);
    ctx.strokeStyle = "#6fc36f";
    ctx.lineWidth = 2;
    const r = 0.3 * this.camera.pixelsPerMeter;
    ctx.beginPath(); ctx.arc(px, py, r, 0, 2 * Math.PI); ctx.stroke();
    ctx.beginPath(); ctx.moveTo(px - 6, py); ctx.lineTo(px + 6, py); ctx.stroke();
    ctx.beginPath(); ctx.moveTo(px, py - 6); ctx.lineTo(px, py + 6); ctx.stroke();
  }

  private velocityArrow(
    ctx: CanvasRenderingContext2D, w: number, h: number,
    from: [number, number], vel: [number, number],
  ): void {
    const [px, py] = worldToScreen(this.camera, w, h, from[0], from[1]);
    const [qx, qy] = worldToScreen(this.camera, w, h, from[0] + vel[0], from[1] + vel[1]);
    ctx.strokeStyle = "#b58ae6";
    ctx.lineWidth = 3;
    ctx.beginPath(); ctx.moveTo(px, py); ctx.lineTo(qx, qy); ctx.stroke();
  }

  private obstacle(
    ctx: CanvasRenderingContext2D, w: number, h: number,
    center: [number, number], radius: number,
  ): void {
    const [px, py] = worldToScreen(this.camera, w, h, center[0], center[1]);
    ctx.fillStyle = "rgba(209, 104, 78, 0.5)";
    ctx.beginPath();
    ctx.arc(px, py, radius * this.camera.pixelsPerMeter, 0, 2 * Math.PI);
    ctx.fill();
  }

  private badge(ctx: CanvasRenderingContext2D, text: string): void {
    ctx.fillStyle = "rgba(0,0,0,0.6)";
    ctx.fillRect(10, 10, 90, 28);
    ctx.fillStyle = "#fff";
    ctx.font = "14px sans-serif";
    ctx.fillText(text, 22, 29);
  }
}
