// Gesture-to-control mapping, kept free of DOM types so it runs under test:
// click -> set_goal, shift-drag -> set_velocity_target, obstacle-arm+click
// -> spawn_obstacle, dropdown -> set_instruction.

import { Camera, screenToWorld } from "./camera.js";
import { SteerClient } from "./client.js";
import { ControlMessage } from "./protocol.js";

export const OBSTACLE_RADIUS = 0.4;
export const OBSTACLE_SPEED = 0.8;
export const DRAG_MIN_PX = 6;

export interface ViewSize {
  w: number;
  h: number;
}

export class Controls {
  client: SteerClient;
  camera: Camera;
  view: ViewSize;
  obstacleArmed = false;
  goalMarker: [number, number] | null = null;
  velocityArrow: [number, number] | null = null;

  constructor(client: SteerClient, camera: Camera, view: ViewSize) {
    this.client = client;
    this.camera = camera;
    this.view = view;
  }

  setInstruction(name: string | null): ControlMessage {
    return this.client.send("set_instruction", { instruction: name });
  }

  armObstacle(): void {
    this.obstacleArmed = true;
  }

  clearGuidance(): ControlMessage {
    this.goalMarker = null;
    this.velocityArrow = null;
    return this.client.send("clear_guidance");
  }

  /** Plain click: goal (or obstacle spawn while armed). */
  click(px: number, py: number): ControlMessage {
    const [x, y] = screenToWorld(this.camera, this.view.w, this.view.h, px, py);
    if (this.obstacleArmed) {
      this.obstacleArmed = false;
      const at = this.client.lastFrame?.state.pos ?? [0, 0];
      const dx = at[0] - x;
      const dy = at[1] - y;
      const n = Math.hypot(dx, dy) || 1;
      return this.client.send("spawn_obstacle", {
        x, y,
        vx: (OBSTACLE_SPEED * dx) / n,
        vy: (OBSTACLE_SPEED * dy) / n,
        radius: OBSTACLE_RADIUS,
      });
    }
    this.goalMarker = [x, y];
    this.velocityArrow = null;
    return this.client.send("set_goal", { x, y });
  }

  /** Shift-drag: the world-frame drag vector becomes the velocity target,
   * one meter of drag per one m/s. */
  drag(fromPx: number, fromPy: number, toPx: number, toPy: number): ControlMessage | null {
    if (Math.hypot(toPx - fromPx, toPy - fromPy) < DRAG_MIN_PX) return null;
    const [x0, y0] = screenToWorld(this.camera, this.view.w, this.view.h, fromPx, fromPy);
    const [x1, y1] = screenToWorld(this.camera, this.view.w, this.view.h, toPx, toPy);
    const vx = x1 - x0;
    const vy = y1 - y0;
    this.velocityArrow = [vx, vy];
    this.goalMarker = null;
    return this.client.send("set_velocity_target", { vx, vy });
  }
}
