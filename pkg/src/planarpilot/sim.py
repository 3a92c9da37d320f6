"""Deterministic planar character physics.

The character is a rigid body in the plane: root position, unit heading,
linear and angular velocity, plus two PD-controlled auxiliary "gait" joints
whose oscillation encodes locomotion style. Integration is semi-implicit
Euler at 30 Hz. All functions are pure; every field may carry leading batch
dimensions, so the same code integrates one state or a stacked batch
bit-identically (numpy elementwise ops do not depend on batch shape).

Falling is a kinematic-bound violation: the drive and steer clamps admit
terminal speeds above the hard bounds, so sustained out-of-distribution
commands push the state over ``v_hard`` / ``omega_hard`` and end the episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

N_JOINTS = 2


@dataclass
class SimParams:
    dt: float = 1.0 / 30.0
    mass: float = 1.0
    inertia: float = 0.5
    lin_drag: float = 2.0       # c_v [N s/m]
    ang_drag: float = 0.6       # c_omega
    f_max: float = 14.0         # terminal speed f_max/c_v = 7 m/s > v_hard
    t_max: float = 8.0          # terminal spin t_max/c_omega ~ 13.3 > omega_hard
    kp: float = 80.0
    kd: float = 17.888543819998318  # 2*sqrt(kp), critically damped
    v_hard: float = 5.0
    omega_hard: float = 12.0
    joint_limit: float = 1.2
    joint_margin: float = 0.2   # fallen when |q| > joint_limit + margin

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        return cls(**d)


@dataclass
class SimState:
    """Full character state. Fields are float64 arrays; leading dims batch."""

    pos: np.ndarray      # (..., 2) m
    heading: np.ndarray  # (..., 2) unit vector
    vel: np.ndarray      # (..., 2) m/s
    omega: np.ndarray    # (...,) rad/s
    q: np.ndarray        # (..., J) rad
    qd: np.ndarray       # (..., J) rad/s

    def copy(self) -> "SimState":
        return SimState(*(np.array(f) for f in self.fields()))

    def fields(self) -> tuple[np.ndarray, ...]:
        return (self.pos, self.heading, self.vel, self.omega, self.q, self.qd)

    def batch_shape(self) -> tuple[int, ...]:
        return self.pos.shape[:-1]

    def select(self, idx) -> "SimState":
        return SimState(*(f[idx] for f in self.fields()))

    def flat(self) -> np.ndarray:
        """Pack to (..., 11): pos, heading, vel, omega, q, qd."""
        return np.concatenate(
            [self.pos, self.heading, self.vel, self.omega[..., None], self.q, self.qd],
            axis=-1,
        )

    @classmethod
    def from_flat(cls, arr: np.ndarray) -> "SimState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(
            pos=arr[..., 0:2].copy(),
            heading=arr[..., 2:4].copy(),
            vel=arr[..., 4:6].copy(),
            omega=arr[..., 6].copy(),
            q=arr[..., 7 : 7 + N_JOINTS].copy(),
            qd=arr[..., 7 + N_JOINTS : 7 + 2 * N_JOINTS].copy(),
        )


@dataclass
class Action:
    """Normalized drive/steer plus PD joint targets; clamped before use."""

    drive: np.ndarray    # (...,) in [-1, 1], scaled by f_max along heading
    steer: np.ndarray    # (...,) in [-1, 1], scaled by t_max
    q_target: np.ndarray  # (..., J) rad

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.drive)[..., None], np.asarray(self.steer)[..., None], self.q_target],
            axis=-1,
        )

    @classmethod
    def from_flat(cls, arr: np.ndarray) -> "Action":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(drive=arr[..., 0].copy(), steer=arr[..., 1].copy(), q_target=arr[..., 2:].copy())


ACTION_DIM = 2 + N_JOINTS
STATE_DIM = 7 + 2 * N_JOINTS


def _check_finite(arrs, what: str) -> None:
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite {what}")


def clamp_action(a: Action, params: SimParams) -> Action:
    lim = params.joint_limit
    return Action(
        drive=np.clip(a.drive, -1.0, 1.0),
        steer=np.clip(a.steer, -1.0, 1.0),
        q_target=np.clip(a.q_target, -lim, lim),
    )


def step(s: SimState, a: Action, params: SimParams) -> SimState:
    """One semi-implicit Euler step; pure and deterministic."""
    _check_finite(s.fields(), "state")
    _check_finite((a.drive, a.steer, a.q_target), "action")
    a = clamp_action(a, params)
    dt = params.dt

    force = a.drive[..., None] * params.f_max * s.heading - params.lin_drag * s.vel
    vel = s.vel + dt * force / params.mass
    pos = s.pos + dt * vel

    torque = a.steer * params.t_max - params.ang_drag * s.omega
    omega = s.omega + dt * torque / params.inertia

    ang = omega * dt
    c, sn = np.cos(ang), np.sin(ang)
    hx, hy = s.heading[..., 0], s.heading[..., 1]
    heading = np.stack([c * hx - sn * hy, sn * hx + c * hy], axis=-1)
    heading = heading / np.linalg.norm(heading, axis=-1, keepdims=True)

    qdd = params.kp * (a.q_target - s.q) - params.kd * s.qd
    qd = s.qd + dt * qdd
    q = s.q + dt * qd

    return SimState(pos=pos, heading=heading, vel=vel, omega=omega, q=q, qd=qd)


def is_fallen(s: SimState, params: SimParams) -> np.ndarray:
    """True where the state violates the kinematic bounds (or is non-finite)."""
    finite = np.ones(s.batch_shape(), dtype=bool)
    for f in s.fields():
        axes = tuple(range(len(s.batch_shape()), f.ndim))
        finite &= np.all(np.isfinite(f), axis=axes) if axes else np.isfinite(f)
    speed = np.linalg.norm(s.vel, axis=-1)
    joints_out = np.any(np.abs(s.q) > params.joint_limit + params.joint_margin, axis=-1)
    bad = (~finite) | (speed > params.v_hard) | (np.abs(s.omega) > params.omega_hard) | joints_out
    return bad


@dataclass
class InitSpec:
    """Reset distribution; the default is the canonical rest pose."""

    randomize: bool = False
    pos_jitter: float = 0.5     # uniform box half-width [m]
    heading_jitter: float = np.pi  # uniform angle half-range [rad]


def reset(seed: int | None = None, spec: InitSpec | None = None) -> SimState:
    """Canonical rest pose at the origin facing +y, optionally jittered."""
    spec = spec or InitSpec()
    pos = np.zeros(2)
    heading = np.array([0.0, 1.0])
    if spec.randomize:
        if seed is None:
            raise ValueError("randomized reset requires a seed")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        pos = rng.uniform(-spec.pos_jitter, spec.pos_jitter, size=2)
        ang = rng.uniform(-spec.heading_jitter, spec.heading_jitter)
        heading = np.array([-np.sin(ang), np.cos(ang)])
    return SimState(
        pos=pos,
        heading=heading,
        vel=np.zeros(2),
        omega=np.float64(0.0),
        q=np.zeros(N_JOINTS),
        qd=np.zeros(N_JOINTS),
    )


def stack_states(states: list[SimState]) -> SimState:
    return SimState(*(np.stack([getattr(s, f) for s in states]) for f in
                      ("pos", "heading", "vel", "omega", "q", "qd")))


def heading_angle(heading: np.ndarray) -> np.ndarray:
    """Angle of the heading measured from +y, counterclockwise positive."""
    return np.arctan2(-heading[..., 0], heading[..., 1])


def rotation_to_local(heading: np.ndarray) -> np.ndarray:
    """(..., 2, 2) matrix rotating world vectors into the frame where this
    heading becomes (0, 1)."""
    hx, hy = heading[..., 0], heading[..., 1]
    # rows: local x axis (right of heading), local y axis (heading)
    return np.stack(
        [np.stack([hy, -hx], axis=-1), np.stack([hx, hy], axis=-1)], axis=-2
    )
