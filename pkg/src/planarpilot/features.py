"""Behavior-window features: canonicalization and normalization.

A window over transitions t = 0..T-1 is canonicalized to the pose of the
state preceding its first transition (the anchor): that frame's root sits
at the origin facing +y, and all positions, headings, and velocities are
rotated into that frame. Joint angles enter as (cos, sin) pairs so the
features stay continuous; joint velocities pass through unchanged.

Per-frame state feature layout (STATE_FEAT = 13 floats), describing the
*next* state induced by the frame's action:

    [0:2]   root position (window frame, m)
    [2:4]   root heading (window frame, unit vector)
    [4:6]   linear velocity (window frame, m/s)
    [6]     angular velocity (rad/s)
    [7:11]  cos/sin per joint: cos q0, sin q0, cos q1, sin q1
    [11:13] joint velocities (rad/s)

A token is the action representation (latent z or raw action) concatenated
with these 13 state features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim

STATE_FEAT = 13
POS = slice(0, 2)
HEADING = slice(2, 4)
VEL = slice(4, 6)
OMEGA = 6
JOINT_TRIG = slice(7, 11)
QD = slice(11, 13)


@dataclass
class Anchor:
    """World pose of the window's reference frame."""

    pos: np.ndarray      # (2,)
    heading: np.ndarray  # (2,) unit

    def rot_to_local(self) -> np.ndarray:
        return sim.rotation_to_local(self.heading)

    def to_list(self) -> list:
        return [*map(float, self.pos), *map(float, self.heading)]

    @classmethod
    def from_list(cls, v) -> "Anchor":
        return cls(pos=np.array(v[:2], dtype=np.float64), heading=np.array(v[2:4], dtype=np.float64))


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {what}")


def state_features(states_flat: np.ndarray, anchor: Anchor) -> np.ndarray:
    """Canonicalized features of packed states (..., 11) w.r.t. ``anchor``."""
    _require_finite(states_flat, "states")
    r = anchor.rot_to_local()  # (2, 2), world -> local
    pos = (states_flat[..., 0:2] - anchor.pos) @ r.T
    heading = states_flat[..., 2:4] @ r.T
    vel = states_flat[..., 4:6] @ r.T
    omega = states_flat[..., 6:7]
    q = states_flat[..., 7:9]
    qd = states_flat[..., 9:11]
    trig = np.stack([np.cos(q[..., 0]), np.sin(q[..., 0]), np.cos(q[..., 1]), np.sin(q[..., 1])], axis=-1)
    return np.concatenate([pos, heading, vel, omega, trig, qd], axis=-1)


def states_from_features(feats: np.ndarray, anchor: Anchor) -> np.ndarray:
    """Inverse of :func:`state_features`; headings are renormalized."""
    r = anchor.rot_to_local()
    pos = feats[..., POS] @ r + anchor.pos
    heading = feats[..., HEADING] @ r
    norm = np.linalg.norm(heading, axis=-1, keepdims=True)
    heading = heading / np.maximum(norm, 1e-8)
    vel = feats[..., VEL] @ r
    omega = feats[..., OMEGA : OMEGA + 1]
    trig = feats[..., JOINT_TRIG]
    q0 = np.arctan2(trig[..., 1], trig[..., 0])
    q1 = np.arctan2(trig[..., 3], trig[..., 2])
    qd = feats[..., QD]
    return np.concatenate([pos, heading, vel, omega, np.stack([q0, q1], axis=-1), qd], axis=-1)


def canonicalize(states_flat: np.ndarray, acts: np.ndarray) -> tuple[np.ndarray, Anchor]:
    """Build window tokens from T+1 packed states and T action features.

    Token t = acts[t] (+) features of state t+1 in the frame of state 0.
    """
    if states_flat.shape[0] != acts.shape[0] + 1:
        raise ValueError(
            f"need T+1 states for T action rows, got {states_flat.shape[0]} and {acts.shape[0]}"
        )
    _require_finite(acts, "action features")
    anchor = Anchor(pos=states_flat[0, 0:2].copy(), heading=states_flat[0, 2:4].copy())
    feats = state_features(states_flat[1:], anchor)
    return np.concatenate([acts, feats], axis=-1), anchor


def decanonicalize(tokens: np.ndarray, anchor: Anchor, act_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Split tokens back into (action features (T, act_dim), packed world states (T, 11))."""
    acts = tokens[..., :act_dim]
    states = states_from_features(tokens[..., act_dim:], anchor)
    return acts, states


@dataclass
class Normalizer:
    """Per-dimension affine scaling to roughly unit variance."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray, floor: float = 1e-3) -> "Normalizer":
        flat = rows.reshape(-1, rows.shape[-1]).astype(np.float64)
        return cls(mean=flat.mean(axis=0), std=np.maximum(flat.std(axis=0), floor))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(mean=np.array(d["mean"], dtype=np.float64), std=np.array(d["std"], dtype=np.float64))
