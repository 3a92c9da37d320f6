// Steering client: connection state machine with auto-reconnect, typed
// message dispatch, and an outbound FIFO. The WebSocket constructor is
// injected so the whole client runs under test against a stub service.

import {
  AckMessage, ControlKind, ControlMessage, ErrorMessage, FrameMessage,
  HelloMessage, control, parseServerMessage,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export type ClientState = "connecting" | "live" | "reconnecting" | "closed";

export interface ClientEvents {
  hello?: (m: HelloMessage) => void;
  frame?: (m: FrameMessage) => void;
  ack?: (m: AckMessage) => void;
  error?: (m: ErrorMessage) => void;
  state?: (s: ClientState) => void;
  badMessage?: (raw: string) => void;
}

export class SteerClient {
  readonly url: string;
  private factory: SocketFactory;
  private sock: SocketLike | null = null;
  private events: ClientEvents;
  private backoffMs = 250;
  private readonly backoffMaxMs = 5_000;
  private closed = false;
  private pending: string[] = [];
  state: ClientState = "connecting";
  vocabulary: string[] = [];
  execSteps = 8;
  lastFrame: FrameMessage | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(url: string, events: ClientEvents, factory?: SocketFactory) {
    this.url = url;
    this.events = events;
    this.factory = factory ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.connect();
  }

  private setState(s: ClientState) {
    this.state = s;
    this.events.state?.(s);
  }

  private connect() {
    if (this.closed) return;
    const sock = this.factory(this.url);
    this.sock = sock;
    sock.onopen = () => {
      this.backoffMs = 250;
      this.setState("live");
      for (const line of this.pending.splice(0)) sock.send(line);
    };
    sock.onclose = () => {
      if (this.closed) return;
      this.setState("reconnecting");
      this.timer = setTimeout(() => this.connect(), this.backoffMs);
      this.backoffMs = Math.min(this.backoffMs * 2, this.backoffMaxMs);
    };
    sock.onmessage = (ev) => this.dispatch(ev.data);
  }

  private dispatch(raw: string) {
    const msg = parseServerMessage(raw);
    if (msg === null) {
      this.events.badMessage?.(raw);
      return;
    }
    switch (msg.type) {
      case "hello":
        this.vocabulary = msg.vocabulary;
        this.execSteps = msg.exec_steps;
        this.events.hello?.(msg);
        break;
      case "frame":
        this.lastFrame = msg;
        this.events.frame?.(msg);
        break;
      case "ack":
        this.events.ack?.(msg);
        break;
      case "error":
        this.events.error?.(msg);
        break;
    }
  }

  /** FIFO send; queued while the socket is down and flushed on reconnect. */
  send(kind: ControlKind, payload: Record<string, unknown> = {}): ControlMessage {
    const msg = control(kind, payload);
    const line = JSON.stringify(msg);
    if (this.state === "live" && this.sock) {
      this.sock.send(line);
    } else {
      this.pending.push(line);
    }
    return msg;
  }

  close() {
    this.closed = true;
    if (this.timer !== null) clearTimeout(this.timer);
    this.setState("closed");
    this.sock?.close();
  }
}
