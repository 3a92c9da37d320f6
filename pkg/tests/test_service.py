"""Protocol conformance against a live in-process service."""

import json

import numpy as np
import pytest
from starlette.testclient import TestClient

import planarpilot.tensorlib as tl
from planarpilot import features, latent, sim
from planarpilot import model as M
from planarpilot.config import RunConfig
from planarpilot.evalh import Bundle
from planarpilot.sampler import SamplerConfig
from planarpilot.service import build_app
from planarpilot.rng import make_rng

T_A = 4


def tiny_bundle(drive_bias: float = 0.0) -> Bundle:
    """Small random model plus an AE whose decoder emits a constant action
    (zero by default, so the character stands and never falls)."""
    ae = latent.ActionAE.init(latent.AEConfig(width=16, hidden_layers=1), seed=1)
    last = f"dec.w{ae.cfg.hidden_layers}"
    ae.params[last].data[:] = 0.0
    ae.params[f"dec.b{ae.cfg.hidden_layers}"].data[:] = 0.0
    ae.params[f"dec.b{ae.cfg.hidden_layers}"].data[0] = drive_bias
    token_dim = ae.cfg.d_z + features.STATE_FEAT
    rows = make_rng(2).standard_normal((64, token_dim))
    cfg = M.ModelConfig(layers=1, width=32, heads=2, window=16, seed=2)
    model = M.BehaviorModel.init(cfg, token_dim, features.Normalizer.fit(rows))
    return Bundle(model=model, ae=ae)


def service_client(drive_bias: float = 0.0):
    run_cfg = RunConfig()
    run_cfg.sampler = SamplerConfig(
        context=2, horizon=4, exec_steps=T_A, ddim_steps=2,
        schedule_kind="full-sequence", stabilization=2,
    )
    app = build_app(tiny_bundle(drive_bias), run_cfg, realtime=False)
    return TestClient(app)


class Script:
    """Typed receive helper over one websocket."""

    def __init__(self, ws):
        self.ws = ws
        self.frames = []

    def recv(self, want: str, limit: int = 2000) -> dict:
        for _ in range(limit):
            msg = self.ws.receive_json()
            if msg["type"] == "frame":
                self.frames.append(msg)
            if msg["type"] == want:
                return msg
        raise AssertionError(f"no {want!r} message within {limit} messages")

    def control(self, kind: str, **payload) -> dict:
        self.ws.send_text(json.dumps({"v": 1, "type": "control", "kind": kind, **payload}))
        return self.recv("ack")

    def control_err(self, kind: str, **payload) -> dict:
        self.ws.send_text(json.dumps({"v": 1, "type": "control", "kind": kind, **payload}))
        return self.recv("error")

    def frames_until(self, step: int) -> list[dict]:
        while not self.frames or self.frames[-1]["step"] < step:
            self.recv("frame")
        return self.frames


def test_hello_and_default_stream():
    with service_client() as client, client.websocket_connect("/ws") as ws:
        s = Script(ws)
        hello = s.recv("hello", limit=5)
        assert hello["vocabulary"][0] == "stand"
        assert hello["exec_steps"] == T_A
        frames = s.frames_until(10)
        assert all(f["instruction"] is None for f in frames)
        steps = [f["step"] for f in frames]
        assert steps == list(range(len(steps)))  # no gaps


def test_instruction_activates_exactly_at_boundary():
    with service_client() as client, client.websocket_connect("/ws") as ws:
        s = Script(ws)
        s.recv("hello")
        s.frames_until(6)
        ack = s.control("set_instruction", instruction="walk-forward")
        assert ack["active_at"] % T_A == 0
        frames = s.frames_until(ack["active_at"] + 2 * T_A)
        for f in frames:
            if f["step"] < ack["active_at"]:
                assert f["instruction"] is None, f
            if f["step"] >= ack["active_at"]:
                assert f["instruction"] == "walk-forward", f
        changes = [f for f in frames if "instruction-change" in f["events"]]
        assert len(changes) == 1  # applied exactly once
        assert changes[0]["step"] == ack["active_at"]


def test_every_control_kind_acknowledged():
    with service_client() as client, client.websocket_connect("/ws") as ws:
        s = Script(ws)
        s.recv("hello")
        assert s.control("set_instruction", instruction="jog-forward")["kind"] == "set_instruction"
        assert s.control("set_goal", x=2.0, y=3.0)["kind"] == "set_goal"
        assert s.control("set_velocity_target", vx=1.0, vy=0.0)["kind"] == "set_velocity_target"
        assert s.control("spawn_obstacle", x=1.0, y=1.0, vx=-0.3, vy=0.0, radius=0.4)["kind"] == "spawn_obstacle"
        assert s.control("clear_guidance")["kind"] == "clear_guidance"
        assert s.control("set_seed", seed=5)["kind"] == "set_seed"
        assert s.control("pause")["kind"] == "pause"
        assert s.control("resume")["kind"] == "resume"
        assert s.control("reset", seed=9)["kind"] == "reset"


def test_guidance_lifecycle_in_frames():
    with service_client() as client, client.websocket_connect("/ws") as ws:
        s = Script(ws)
        s.recv("hello")
        ack = s.control("set_goal", x=50.0, y=50.0)  # far away: never auto-reached
        frames = s.frames_until(ack["active_at"] + T_A)
        active = [f for f in frames if f["step"] >= ack["active_at"]]
        assert active and all(f["guidance"]["kind"] == "goal" for f in active)
        assert "dist_to_goal" in active[0]["metrics"]
        ack2 = s.control("clear_guidance")
        frames = s.frames_until(ack2["active_at"] + T_A)
        after = [f for f in frames if f["step"] >= ack2["active_at"]]
        assert after and all(f["guidance"] is None for f in after)


def test_malformed_messages_answered_without_stream_break():
    with service_client() as client, client.websocket_connect("/ws") as ws:
        s = Script(ws)
        s.recv("hello")
        err = s.control_err("dance")
        assert "unknown control kind" in err["message"]
        err = s.control_err("set_goal", x="not-a-number", y=0.0)
        assert "numeric" in err["message"]
        err = s.control_err("set_instruction", instruction="moonwalk")
        assert "vocabulary" in err["message"]
        ws.send_text("{not json")
        err = s.recv("error")
        assert "malformed" in err["message"]
        # stream continues
        before = s.frames[-1]["step"] if s.frames else 0
        s.frames_until(before + 2 * T_A)


def test_pause_resume_continuous_steps():
    with service_client() as client, client.websocket_connect("/ws") as ws:
        s = Script(ws)
        s.recv("hello")
        s.frames_until(8)
        s.control("pause")
        s.control("resume")
        frames = s.frames_until(s.frames[-1]["step"] + 2 * T_A)
        steps = [f["step"] for f in frames]
        assert steps == list(range(steps[0], steps[-1] + 1))


def test_reset_with_seed_reproduces_stream():
    def collect(n):
        with service_client() as client, client.websocket_connect("/ws") as ws:
            s = Script(ws)
            s.recv("hello")
            s.control("reset", seed=123)
            # FIFO: the new stream begins at the first step-0 frame after reset
            while True:
                f = s.recv("frame")
                if f["step"] == 0:
                    break
            out = [f]
            while len(out) < n:
                f = s.recv("frame")
                if f["step"] == len(out):
                    out.append(f)
            return out

    a = collect(12)
    b = collect(12)
    assert json.dumps([f["state"] for f in a]) == json.dumps([f["state"] for f in b])


def test_fall_event_pauses_until_reset():
    # decoder biased to full drive: speed exceeds the hard bound and falls
    with service_client(drive_bias=50.0) as client, client.websocket_connect("/ws") as ws:
        s = Script(ws)
        s.recv("hello")
        fall_frame = None
        for _ in range(600):
            f = s.recv("frame")
            if "fall" in f["events"]:
                fall_frame = f
                break
        assert fall_frame is not None, "expected a fall"
        ack = s.control("reset", seed=1)
        assert ack["kind"] == "reset"
        f = s.recv("frame")
        assert f["step"] >= 0
