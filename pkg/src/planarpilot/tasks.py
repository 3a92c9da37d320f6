"""Task definitions: guidance losses on predicted windows, plus generators.

Losses are evaluated in the world frame on the decanonicalized prediction
(future frames only) and built with tensor ops so the sampler can take
their gradient with respect to the prediction. Degenerate configurations
use smooth conventions: the distance term is shifted to vanish exactly at
coincidence, angular terms are gated off near their undefined points, and
a zero target speed drops the direction terms entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sim
from . import tensorlib as tl
from .rng import make_rng

EPS_SMOOTH = 1e-8   # norm smoothing (m^2)
EPS_GATE = 1e-6     # angular terms fade out within ~1 mm of coincidence


@dataclass
class GuidanceWeights:
    goal_w1: float = 1.0
    goal_w2: float = 0.3
    vel_w1: float = 1.0
    vel_w2: float = 0.5
    vel_w3: float = 0.3

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceWeights":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _smooth_norm(x: tl.Tensor) -> tl.Tensor:
    """sqrt(|x|^2 + eps) along the last axis; smooth at 0."""
    return tl.sqrt(tl.add_const(tl.tsum(tl.mul(x, x), axis=-1), EPS_SMOOTH))


def _shifted_norm(x: tl.Tensor) -> tl.Tensor:
    """Smoothed norm shifted to be exactly 0 at coincidence."""
    return tl.add_const(_smooth_norm(x), -float(np.sqrt(EPS_SMOOTH)))


def _gate(x: tl.Tensor) -> tl.Tensor:
    """|x|^2 / (|x|^2 + eps): 0 at coincidence, ~1 elsewhere."""
    sq = tl.tsum(tl.mul(x, x), axis=-1)
    return tl.div(sq, tl.add_const(sq, EPS_GATE))


def goal_loss_graph(world: dict, goals: np.ndarray, w1: float, w2: float) -> tl.Tensor:
    """Sum over future frames of w1 * distance-to-goal plus w2 * heading
    misalignment toward the goal; the orientation term vanishes smoothly
    when a predicted position coincides with the goal."""
    pos, heading = world["pos"], world["heading"]
    b, h, _ = pos.shape
    g = tl.constant(np.broadcast_to(goals[:, None, :], (b, h, 2)).copy())
    delta = tl.sub(g, pos)
    dist = _shifted_norm(delta)
    cos = tl.div(
        tl.tsum(tl.mul(heading, delta), axis=-1),
        tl.mul(_smooth_norm(heading), _smooth_norm(delta)),
    )
    misalign = tl.mul(tl.add_const(tl.neg(cos), 1.0), _gate(delta))
    per_frame = tl.add(tl.scale(dist, w1), tl.scale(misalign, w2))
    return tl.tsum(per_frame)


def velocity_loss_graph(world: dict, targets: np.ndarray, w1: float, w2: float, w3: float) -> tl.Tensor:
    """Speed magnitude error plus velocity/heading direction misalignment.

    For (near-)zero target speeds the direction terms are undefined and are
    dropped by convention; only the speed term remains.
    """
    vel, heading = world["vel"], world["heading"]
    b, h, _ = vel.shape
    tgt = np.asarray(targets, dtype=np.float64)
    tgt_speed = np.linalg.norm(tgt, axis=-1)  # (b,)
    tgt_b = tl.constant(np.broadcast_to(tgt[:, None, :], (b, h, 2)).copy())
    speed = _smooth_norm(vel)
    speed_err = tl.sub(speed, tl.constant(np.broadcast_to(tgt_speed[:, None], (b, h)).copy()))
    loss = tl.scale(tl.tsum(tl.mul(speed_err, speed_err)), w1)
    moving = tgt_speed > 1e-6
    if np.any(moving):
        # zero gradient flows to non-moving episodes through the mask
        mask = tl.constant(np.broadcast_to(moving[:, None].astype(np.float64), (b, h)).copy())
        denom = tl.mul(_smooth_norm(vel), _smooth_norm(tgt_b))
        cos_v = tl.div(tl.tsum(tl.mul(vel, tgt_b), axis=-1), denom)
        term_v = tl.mul(tl.add_const(tl.neg(cos_v), 1.0), mask)
        denom_o = tl.mul(_smooth_norm(heading), _smooth_norm(tgt_b))
        cos_o = tl.div(tl.tsum(tl.mul(heading, tgt_b), axis=-1), denom_o)
        term_o = tl.mul(tl.add_const(tl.neg(cos_o), 1.0), mask)
        loss = tl.add(loss, tl.add(tl.scale(tl.tsum(term_v), w2), tl.scale(tl.tsum(term_o), w3)))
    return loss


def obstacle_loss_graph(world: dict, centers: np.ndarray, radii: np.ndarray) -> tl.Tensor:
    """Softplus clearance penalty: log(1 + exp(-(d - r - 1))) per frame.

    ``centers`` is the obstacle trajectory extrapolated over the horizon,
    shape (B, H, 2); finite everywhere, no degenerate cases.
    """
    pos = world["pos"]
    b, h, _ = pos.shape
    delta = tl.sub(pos, tl.constant(np.asarray(centers, dtype=np.float64).reshape(b, h, 2)))
    d = _smooth_norm(delta)
    margin = tl.add(d, tl.constant(np.broadcast_to(-(radii[:, None] + 1.0), (b, h)).copy()))
    return tl.tsum(tl.softplus(tl.neg(margin)))


# ---------------------------------------------------------------------------
# runtime task state


@dataclass
class GoalTask:
    kind = "goal"
    goal: np.ndarray
    radius: float = 0.3
    budget: int = 600
    mode: str = "near"

    reached_step: int | None = None

    def frame_metrics(self, state: np.ndarray) -> dict[str, float]:
        return {"dist_to_goal": float(np.linalg.norm(state[0:2] - self.goal))}

    def update(self, state: np.ndarray, dt: float) -> None:
        pass

    def outcome(self, state: np.ndarray, step: int) -> str | None:
        if np.linalg.norm(state[0:2] - self.goal) <= self.radius:
            return "success"
        return None

    def guidance_params(self) -> dict:
        return {"goal": self.goal}

    def snapshot(self) -> dict:
        return {"kind": "goal", "goal": self.goal.tolist(), "radius": self.radius,
                "budget": self.budget, "mode": self.mode}


@dataclass
class VelocityTask:
    kind = "velocity"
    targets: np.ndarray          # (n_transitions, 2)
    hold_steps: int = 500
    transition_steps: int = 120

    def target_at(self, step: int) -> np.ndarray:
        i = min(step // self.hold_steps, len(self.targets) - 1)
        return self.targets[i]

    @property
    def total_steps(self) -> int:
        return self.hold_steps * len(self.targets)

    def frame_metrics(self, state: np.ndarray) -> dict[str, float]:
        # step index is appended by the engine via set_step
        tgt = self.target_at(self._step)
        return {
            "vel_error": float(np.linalg.norm(state[4:6] - tgt)),
            "target_speed": float(np.linalg.norm(tgt)),
        }

    _step: int = 0

    def update(self, state: np.ndarray, dt: float) -> None:
        self._step += 1

    def outcome(self, state: np.ndarray, step: int) -> str | None:
        return None

    def guidance_params(self) -> dict:
        return {"target": self.target_at(self._step)}

    def snapshot(self) -> dict:
        return {"kind": "velocity", "targets": self.targets.tolist(),
                "hold_steps": self.hold_steps, "transition_steps": self.transition_steps}


@dataclass
class ObstacleTask:
    kind = "obstacle"
    center: np.ndarray
    speed: float
    radius: float
    escape_dist: float = 3.0
    budget: int = 900
    vel: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def frame_metrics(self, state: np.ndarray) -> dict[str, float]:
        return {"clearance": float(np.linalg.norm(state[0:2] - self.center) - self.radius)}

    def update(self, state: np.ndarray, dt: float) -> None:
        # pursues the character at constant speed
        to_char = state[0:2] - self.center
        n = np.linalg.norm(to_char)
        if n > 1e-9:
            self.vel = self.speed * to_char / n
        self.center = self.center + self.vel * dt

    def outcome(self, state: np.ndarray, step: int) -> str | None:
        d = np.linalg.norm(state[0:2] - self.center)
        if d < self.radius:
            return "collision"
        if d >= self.escape_dist:
            return "success"
        return None

    def horizon_centers(self, horizon: int, dt: float) -> np.ndarray:
        """Constant-velocity extrapolation over the prediction horizon."""
        steps = np.arange(1, horizon + 1)[:, None]
        return self.center[None, :] + steps * dt * self.vel[None, :]

    def guidance_params(self) -> dict:
        return {"center": self.center, "vel": self.vel, "radius": self.radius}

    def snapshot(self) -> dict:
        return {"kind": "obstacle", "center": self.center.tolist(), "speed": self.speed,
                "radius": self.radius, "escape_dist": self.escape_dist, "budget": self.budget}


def batched_guidance_loss(kind: str, tasks: list, world: dict, weights: GuidanceWeights,
                          horizon: int, dt: float) -> tl.Tensor:
    """Sum of per-episode task losses; each episode's gradient is independent."""
    if kind == "goal":
        goals = np.stack([t.goal for t in tasks])
        return goal_loss_graph(world, goals, weights.goal_w1, weights.goal_w2)
    if kind == "velocity":
        targets = np.stack([t.target_at(t._step) for t in tasks])
        return velocity_loss_graph(world, targets, weights.vel_w1, weights.vel_w2, weights.vel_w3)
    if kind == "obstacle":
        centers = np.stack([t.horizon_centers(horizon, dt) for t in tasks])
        radii = np.array([t.radius for t in tasks])
        return obstacle_loss_graph(world, centers, radii)
    raise ValueError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# seeded generators (evaluation protocols)

GOAL_NEAR_RANGE = (1.0, 2.0)
GOAL_FAR_RANGE = (2.0, 6.0)
VEL_SPEED_RANGE = (0.0, 2.0)
OBSTACLE_SPAWN_RANGE = (1.8, 2.2)
OBSTACLE_SPEED_RANGE = (0.6, 1.1)
OBSTACLE_RADIUS_RANGE = (0.3, 0.5)


def spawn_task(kind: str, seed: int, mode: str = "near", n_transitions: int = 20):
    """Deterministic task instance plus initial sim state."""
    rng = make_rng(seed, 40)
    init = sim.reset(seed=seed, spec=sim.InitSpec(randomize=True))
    if kind == "goal":
        lo, hi = GOAL_NEAR_RANGE if mode == "near" else GOAL_FAR_RANGE
        dist = rng.uniform(lo, hi)
        ang = rng.uniform(-np.pi, np.pi)
        goal = init.pos + dist * np.array([np.cos(ang), np.sin(ang)])
        budget = 600 if mode == "near" else 1200
        return GoalTask(goal=goal, budget=budget, mode=mode), init
    if kind == "velocity":
        speeds = rng.uniform(*VEL_SPEED_RANGE, size=n_transitions)
        angs = rng.uniform(-np.pi, np.pi, size=n_transitions)
        targets = np.stack([speeds * np.cos(angs), speeds * np.sin(angs)], axis=-1)
        return VelocityTask(targets=targets), init
    if kind == "obstacle":
        dist = rng.uniform(*OBSTACLE_SPAWN_RANGE)
        ang = rng.uniform(-np.pi, np.pi)
        center = init.pos + dist * np.array([np.cos(ang), np.sin(ang)])
        task = ObstacleTask(
            center=center,
            speed=float(rng.uniform(*OBSTACLE_SPEED_RANGE)),
            radius=float(rng.uniform(*OBSTACLE_RADIUS_RANGE)),
        )
        to_char = init.pos - task.center
        task.vel = task.speed * to_char / np.linalg.norm(to_char)
        return task, init
    raise ValueError(f"unknown task kind {kind!r}")
