"""Live-steering service: one WebSocket session driving one rollout loop.

The rollout loop runs on its own thread and is the only writer of session
state. Control messages are validated on arrival (malformed ones get an
error reply and change nothing), queued, and applied exactly once at the
next replanning boundary; the acknowledgment names the step at which the
change becomes active. Frames stream as JSON at sim rate (or as fast as
possible when the throttle is off). See PROTOCOL.md for the schemas.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import sim, tasks
from .expert import SKILL_IDS
from .sampler import BatchRollout, EpisodeSpec, SamplerConfig

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
SESSION_STEP_LIMIT = 10**9


class NonTerminalTask:
    """Wraps a task so the engine never ends the episode on it; the session
    watches the inner outcome itself (events, auto-clear on goal success).
    Everything except ``outcome`` delegates to the wrapped task."""

    def __init__(self, inner):
        object.__setattr__(self, "inner", inner)

    def outcome(self, state, step):
        return None

    def __getattr__(self, name):
        return getattr(self.inner, name)


GUIDANCE_STRENGTH = {"goal": 0.15, "velocity": 0.05, "obstacle": 0.2}


@dataclass
class ControlResult:
    ok: bool
    kind: str | None
    active_at: int | None = None
    message: str | None = None

    def reply(self) -> dict:
        if self.ok:
            return {"v": PROTOCOL_VERSION, "type": "ack", "kind": self.kind,
                    "active_at": self.active_at}
        return {"v": PROTOCOL_VERSION, "type": "error", "kind": self.kind,
                "message": self.message}


class SteerSession:
    """Single-episode rollout with live control; single-writer loop thread."""

    def __init__(self, bundle, run_cfg, realtime: bool | None = None):
        self.bundle = bundle
        self.run_cfg = run_cfg
        self.cfg = SamplerConfig.from_dict(run_cfg.sampler.to_dict())
        self.realtime = realtime if realtime is not None else True
        self.default_seed = 0
        self.control_q: "queue.Queue[dict]" = queue.Queue()
        # bounded with blocking puts: a slow consumer paces the loop
        self.frame_q: "queue.Queue[dict]" = queue.Queue(maxsize=1024)
        self.paused = False
        self.client_connected = False
        self.fallen = False
        self.planned_until = 0
        self._boundary_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._build_engine(self.default_seed)

    # -- lifecycle --

    def _build_engine(self, seed: int) -> None:
        spec = EpisodeSpec(seed=seed, init_state=sim.reset(), instruction=None,
                           task=None, max_steps=SESSION_STEP_LIMIT)
        self.engine = BatchRollout(self.bundle.model, self.bundle.ae, self.cfg, [spec],
                                   sim_params=self.bundle.sim_params,
                                   weights=self.run_cfg.weights)
        self.spec = spec
        self.cfg.guidance_strength = 0.0
        self.fallen = False
        self.planned_until = 0
        self._emitted = 0

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)

    # -- control intake (called from the websocket handler) --

    @property
    def step(self) -> int:
        return self.engine.eps[0].steps

    def next_boundary(self) -> int:
        """First replanning boundary a queued control message can reach."""
        t_a = self.cfg.exec_steps
        step = self.step
        ceil_boundary = ((step + t_a - 1) // t_a) * t_a
        return max(ceil_boundary, self.planned_until)

    def submit(self, raw: str) -> dict:
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError as e:
            return ControlResult(False, None, message=f"malformed JSON: {e}").reply()
        kind = msg.get("kind")
        err = self._validate(kind, msg)
        if err is not None:
            return ControlResult(False, kind, message=err).reply()
        with self._boundary_lock:
            if kind in ("pause", "resume", "reset", "set_seed"):
                active = self.step
            else:
                active = self.next_boundary()
            self.control_q.put(msg)
        return ControlResult(True, kind, active_at=active).reply()

    def _validate(self, kind, msg) -> str | None:
        if msg.get("type") != "control":
            return "message type must be 'control'"
        if kind == "set_instruction":
            name = msg.get("instruction")
            if name is not None and name not in SKILL_IDS:
                return f"unknown instruction {name!r}; vocabulary: {SKILL_IDS}"
            return None
        if kind == "set_goal":
            return None if _has_floats(msg, "x", "y") else "set_goal needs numeric x, y"
        if kind == "set_velocity_target":
            return None if _has_floats(msg, "vx", "vy") else "set_velocity_target needs numeric vx, vy"
        if kind == "spawn_obstacle":
            if not _has_floats(msg, "x", "y", "vx", "vy", "radius"):
                return "spawn_obstacle needs numeric x, y, vx, vy, radius"
            if float(msg["radius"]) <= 0:
                return "obstacle radius must be positive"
            return None
        if kind in ("clear_guidance", "pause", "resume"):
            return None
        if kind == "reset":
            if "seed" in msg and not isinstance(msg["seed"], int):
                return "reset seed must be an integer"
            return None
        if kind == "set_seed":
            return None if isinstance(msg.get("seed"), int) else "set_seed needs an integer seed"
        return f"unknown control kind {kind!r}"

    # -- loop (single writer) --

    def _apply(self, msg: dict) -> None:
        kind = msg["kind"]
        if kind == "set_instruction":
            self.spec.instruction = msg.get("instruction")
        elif kind == "set_goal":
            goal = np.array([float(msg["x"]), float(msg["y"])])
            self.spec.task = NonTerminalTask(tasks.GoalTask(goal=goal, budget=SESSION_STEP_LIMIT))
            self.cfg.guidance_strength = self._strength("goal")
        elif kind == "set_velocity_target":
            tgt = np.array([[float(msg["vx"]), float(msg["vy"])]])
            self.spec.task = NonTerminalTask(tasks.VelocityTask(targets=tgt, hold_steps=SESSION_STEP_LIMIT))
            self.cfg.guidance_strength = self._strength("velocity")
        elif kind == "spawn_obstacle":
            vel = np.array([float(msg["vx"]), float(msg["vy"])])
            task = tasks.ObstacleTask(
                center=np.array([float(msg["x"]), float(msg["y"])]),
                speed=float(np.linalg.norm(vel)) or 0.5,
                radius=float(msg["radius"]),
                vel=vel,
            )
            self.spec.task = NonTerminalTask(task)
            self.cfg.guidance_strength = self._strength("obstacle")
        elif kind == "clear_guidance":
            self.spec.task = None
            self.cfg.guidance_strength = 0.0
        elif kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False
        elif kind == "set_seed":
            self.default_seed = int(msg["seed"])
        elif kind == "reset":
            seed = int(msg.get("seed", self.default_seed))
            self._build_engine(seed)

    def _strength(self, kind: str) -> float:
        override = self.run_cfg.task_samplers.get(kind, {})
        return float(override.get("guidance_strength", GUIDANCE_STRENGTH[kind]))

    def _loop(self) -> None:
        while not self._stop.is_set():
            if self.paused or not self.client_connected or self.fallen:
                # drain control even while paused so reset/resume work
                with self._boundary_lock:
                    self._drain_controls()
                time.sleep(0.02)
                continue
            with self._boundary_lock:
                self._drain_controls()
                if not (self.paused or self.fallen):
                    self.planned_until = self.step + self.cfg.exec_steps
            if self.paused or self.fallen:
                continue
            t0 = time.perf_counter()
            e = self.engine.eps[0]
            before = len(e.rows_states)
            try:
                alive = self.engine.run_block()
            except Exception:
                log.exception("rollout block failed; session paused (reset to recover)")
                self.paused = True
                continue
            self._emit_frames(e, before)
            if e.outcome == "fall":
                self.fallen = True
            if not alive:
                self.paused = True
            if self.realtime:
                budget = (len(e.rows_states) - before) * self.engine.params.dt
                left = budget - (time.perf_counter() - t0)
                if left > 0:
                    time.sleep(left)
            else:
                time.sleep(0.001)  # yield so consumers are never starved

    def _drain_controls(self) -> None:
        while True:
            try:
                msg = self.control_q.get_nowait()
            except queue.Empty:
                return
            self._apply(msg)

    def _emit_frames(self, e, start: int) -> None:
        task = self.spec.task
        for t in range(start, len(e.rows_states)):
            state = e.rows_states[t]
            frame = {
                "v": PROTOCOL_VERSION,
                "type": "frame",
                "step": self._emitted,
                "state": {
                    "pos": state[0:2].tolist(),
                    "heading": state[2:4].tolist(),
                    "vel": state[4:6].tolist(),
                    "omega": float(state[6]),
                    "q": state[7:9].tolist(),
                    "qd": state[9:11].tolist(),
                },
                "instruction": e.rows_instr[t],
                "guidance": task.snapshot() if task is not None else None,
                "metrics": {k: float(v[t]) for k, v in e.rows_metrics.items()
                            if t < len(v)} if e.rows_metrics else {},
                "events": [k for s, k in e.events if s == t],
            }
            self._emitted += 1
            # watch the inner task for non-terminal outcomes
            if task is not None and task.kind == "goal":
                if task.inner.outcome(state, t) == "success":
                    frame["events"] = frame["events"] + ["goal-reached"]
                    self.spec.task = None
                    self.cfg.guidance_strength = 0.0
                    task = None
            self._put_frame(frame)

    def _put_frame(self, frame: dict) -> None:
        while not self._stop.is_set():
            try:
                self.frame_q.put(frame, timeout=0.1)
                return
            except queue.Full:
                if not self.client_connected:
                    return  # nobody listening; stream resumes from current step

    def hello(self) -> dict:
        return {
            "v": PROTOCOL_VERSION,
            "type": "hello",
            "vocabulary": list(SKILL_IDS),
            "exec_steps": self.cfg.exec_steps,
            "dt": self.engine.params.dt,
            "step": self.step,
        }


def _has_floats(msg: dict, *keys: str) -> bool:
    return all(isinstance(msg.get(k), (int, float)) and not isinstance(msg.get(k), bool) for k in keys)


def build_app(bundle, run_cfg, realtime: bool | None = None) -> FastAPI:
    app = FastAPI()
    session = SteerSession(bundle, run_cfg, realtime=realtime)
    app.state.session = session

    @app.on_event("startup")
    def _startup():
        session.start()

    @app.on_event("shutdown")
    def _shutdown():
        session.stop()

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        import asyncio

        await ws.accept()
        session.client_connected = True
        await ws.send_json(session.hello())
        loop = asyncio.get_event_loop()

        async def pump_frames():
            while True:
                frame = await loop.run_in_executor(None, _get_with_timeout, session.frame_q)
                if frame is not None:
                    await ws.send_json(frame)

        pump = asyncio.create_task(pump_frames())
        try:
            while True:
                raw = await ws.receive_text()
                await ws.send_json(session.submit(raw))
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()
            session.client_connected = False  # pauses the loop until reconnect

    return app


def _get_with_timeout(q: "queue.Queue[dict]"):
    try:
        return q.get(timeout=0.1)
    except queue.Empty:
        return None
