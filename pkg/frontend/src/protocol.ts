// Wire types for the steering service (see PROTOCOL.md in the repo root).
// Unknown fields are ignored on purpose: older clients keep working when
// the service adds fields.

export const PROTOCOL_VERSION = 1;

export interface CharacterState {
  pos: [number, number];
  heading: [number, number];
  vel: [number, number];
  omega: number;
  q: number[];
  qd: number[];
}

export interface HelloMessage {
  v: number;
  type: "hello";
  vocabulary: string[];
  exec_steps: number;
  dt: number;
  step: number;
}

export interface FrameMessage {
  v: number;
  type: "frame";
  step: number;
  state: CharacterState;
  instruction: string | null;
  guidance: Record<string, unknown> | null;
  metrics: Record<string, number>;
  events: string[];
}

export interface AckMessage {
  v: number;
  type: "ack";
  kind: string;
  active_at: number;
}

export interface ErrorMessage {
  v: number;
  type: "error";
  kind: string | null;
  message: string;
}

export type ServerMessage = HelloMessage | FrameMessage | AckMessage | ErrorMessage;

export type ControlKind =
  | "set_instruction"
  | "set_goal"
  | "set_velocity_target"
  | "spawn_obstacle"
  | "clear_guidance"
  | "pause"
  | "resume"
  | "reset"
  | "set_seed";

export interface ControlMessage {
  v: number;
  type: "control";
  kind: ControlKind;
  [key: string]: unknown;
}

export function control(kind: ControlKind, payload: Record<string, unknown> = {}): ControlMessage {
  return { v: PROTOCOL_VERSION, type: "control", kind, ...payload };
}

function isFinitePair(v: unknown): v is [number, number] {
  return (
    Array.isArray(v) && v.length === 2 &&
    typeof v[0] === "number" && Number.isFinite(v[0]) &&
    typeof v[1] === "number" && Number.isFinite(v[1])
  );
}

/** Parse one server line; returns null for anything malformed (the caller
 * surfaces it without crashing the render loop). */
export function parseServerMessage(raw: string): ServerMessage | null {
  let msg: unknown;
  try {
    msg = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof msg !== "object" || msg === null) return null;
  const m = msg as Record<string, unknown>;
  switch (m.type) {
    case "hello":
      if (!Array.isArray(m.vocabulary) || typeof m.exec_steps !== "number") return null;
      return m as unknown as HelloMessage;
    case "frame": {
      const st = m.state as Record<string, unknown> | undefined;
      if (!st || !isFinitePair(st.pos) || !isFinitePair(st.heading)) return null;
      if (typeof m.step !== "number") return null;
      return m as unknown as FrameMessage;
    }
    case "ack":
      if (typeof m.kind !== "string" || typeof m.active_at !== "number") return null;
      return m as unknown as AckMessage;
    case "error":
      if (typeof m.message !== "string") return null;
      return m as unknown as ErrorMessage;
    default:
      return null;
  }
}
