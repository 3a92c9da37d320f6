"""Conditional autoencoder over expert transitions.

The encoder maps (current state, next state) to a compact latent action z;
the decoder maps (current state, z) back to an executable action. Both
consume canonicalized features in the current state's local frame, so the
latent space is invariant to world pose. Decoder outputs are squashed, so
decoded actions always respect the simulator clamps.

Training is offline supervised reconstruction of the stored expert actions
with a KL regularizer toward the unit Gaussian. A second pass fills z for
every stored transition (posterior mean), which is what the behavior model
trains on.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features, sim
from . import tensorlib as tl
from .expert import Dataset
from .rng import make_rng

LOCAL_FEAT = 9   # v_local(2) omega(1) cos/sin q(4) qd(2)
GOAL_FEAT = features.STATE_FEAT


@dataclass
class AEConfig:
    d_z: int = 8
    width: int = 128
    hidden_layers: int = 3
    beta_kl: float = 1e-3
    lr: float = 1e-3
    warmup_steps: int = 200
    steps: int = 4000
    batch: int = 256
    holdout_every: int = 20  # every k-th transition is held out

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def local_state_features(states_flat: np.ndarray) -> np.ndarray:
    """State features in the state's own frame (pose drops out)."""
    r = sim.rotation_to_local(states_flat[..., 2:4])
    v_local = np.einsum("...ij,...j->...i", r, states_flat[..., 4:6])
    omega = states_flat[..., 6:7]
    q = states_flat[..., 7:9]
    trig = np.stack(
        [np.cos(q[..., 0]), np.sin(q[..., 0]), np.cos(q[..., 1]), np.sin(q[..., 1])], axis=-1
    )
    qd = states_flat[..., 9:11]
    return np.concatenate([v_local, omega, trig, qd], axis=-1)


def goal_features(states_flat: np.ndarray, goals_flat: np.ndarray) -> np.ndarray:
    """Next-state features relative to the current state's pose."""
    out = np.empty(goals_flat.shape[:-1] + (GOAL_FEAT,), dtype=np.float64)
    r = sim.rotation_to_local(states_flat[..., 2:4])
    dpos = goals_flat[..., 0:2] - states_flat[..., 0:2]
    out[..., features.POS] = np.einsum("...ij,...j->...i", r, dpos)
    out[..., features.HEADING] = np.einsum("...ij,...j->...i", r, goals_flat[..., 2:4])
    out[..., features.VEL] = np.einsum("...ij,...j->...i", r, goals_flat[..., 4:6])
    out[..., features.OMEGA] = goals_flat[..., 6]
    q = goals_flat[..., 7:9]
    out[..., features.JOINT_TRIG] = np.stack(
        [np.cos(q[..., 0]), np.sin(q[..., 0]), np.cos(q[..., 1]), np.sin(q[..., 1])], axis=-1
    )
    out[..., features.QD] = goals_flat[..., 9:11]
    return out


def _mlp_params(rng: np.random.Generator, dims: list[int], prefix: str) -> dict[str, tl.Tensor]:
    params = {}
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((din, dout)) * np.sqrt(2.0 / (din + dout))
        params[f"{prefix}.w{i}"] = tl.parameter(w)
        params[f"{prefix}.b{i}"] = tl.parameter(np.zeros(dout))
    return params


def _mlp_forward(params: dict, prefix: str, x: tl.Tensor, n_layers: int) -> tl.Tensor:
    h = x
    for i in range(n_layers + 1):
        h = tl.add_bias(tl.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers:
            h = tl.gelu(h)
    return h


class ActionAE:
    def __init__(self, cfg: AEConfig, params: dict[str, tl.Tensor], sim_params: sim.SimParams):
        self.cfg = cfg
        self.params = params
        self.sim_params = sim_params

    @classmethod
    def init(cls, cfg: AEConfig, seed: int, sim_params: sim.SimParams | None = None) -> "ActionAE":
        rng = make_rng(seed, 10)
        enc_dims = [LOCAL_FEAT + GOAL_FEAT] + [cfg.width] * cfg.hidden_layers + [2 * cfg.d_z]
        dec_dims = [LOCAL_FEAT + cfg.d_z] + [cfg.width] * cfg.hidden_layers + [sim.ACTION_DIM]
        params = _mlp_params(rng, enc_dims, "enc") | _mlp_params(rng, dec_dims, "dec")
        return cls(cfg, params, sim_params or sim.SimParams())

    # -- graph builders (tensor in, tensor out) --

    def encode_graph(self, enc_in: tl.Tensor) -> tuple[tl.Tensor, tl.Tensor]:
        out = _mlp_forward(self.params, "enc", enc_in, self.cfg.hidden_layers)
        mean, logvar = tl.split(out, [self.cfg.d_z, self.cfg.d_z], axis=-1)
        return mean, logvar

    def decode_graph(self, dec_in: tl.Tensor) -> tl.Tensor:
        raw = _mlp_forward(self.params, "dec", dec_in, self.cfg.hidden_layers)
        drive, steer, qt = tl.split(raw, [1, 1, sim.N_JOINTS], axis=-1)
        qt = tl.scale(tl.tanh(qt), self.sim_params.joint_limit)
        return tl.concat([tl.tanh(drive), tl.tanh(steer), qt], axis=-1)

    # -- numpy front ends --

    def encode(self, states_flat: np.ndarray, goals_flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior (mean, logvar); deterministic use takes the mean."""
        if not (np.all(np.isfinite(states_flat)) and np.all(np.isfinite(goals_flat))):
            raise ValueError("non-finite encoder input")
        x = np.concatenate(
            [local_state_features(states_flat), goal_features(states_flat, goals_flat)], axis=-1
        )
        with tl.no_grad():
            mean, logvar = self.encode_graph(tl.constant(x.reshape(-1, x.shape[-1])))
        shape = states_flat.shape[:-1] + (self.cfg.d_z,)
        return mean.data.reshape(shape), logvar.data.reshape(shape)

    def encode_mean(self, states_flat: np.ndarray, goals_flat: np.ndarray) -> np.ndarray:
        return self.encode(states_flat, goals_flat)[0]

    def decode(self, states_flat: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Decoded action features (..., 4); always inside the clamps."""
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite latent")
        x = np.concatenate([local_state_features(states_flat), z], axis=-1)
        with tl.no_grad():
            out = self.decode_graph(tl.constant(x.reshape(-1, x.shape[-1])))
        return out.data.reshape(states_flat.shape[:-1] + (sim.ACTION_DIM,)).astype(np.float64)

    def decode_action(self, s: sim.SimState, z: np.ndarray) -> sim.Action:
        return sim.Action.from_flat(self.decode(s.flat(), z))

    # -- persistence --

    def save(self, path: str | Path) -> None:
        tl.save_checkpoint(
            path,
            {k: p.data for k, p in self.params.items()},
            {"kind": "action_ae", "config": self.cfg.to_dict(), "sim_params": self.sim_params.to_dict()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "ActionAE":
        tensors, hyper = tl.load_checkpoint(path)
        if hyper.get("kind") != "action_ae":
            raise ValueError(f"checkpoint at {path} is not an action AE")
        cfg = AEConfig.from_dict(hyper["config"])
        params = {k: tl.parameter(v) for k, v in tensors.items()}
        return cls(cfg, params, sim.SimParams.from_dict(hyper["sim_params"]))


def transition_arrays(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (s_t, s_{t+1}, a_t) rows of the corpus, packed."""
    s = np.concatenate([ep.states[:-1] for ep in ds.episodes])
    g = np.concatenate([ep.states[1:] for ep in ds.episodes])
    a = np.concatenate([ep.actions for ep in ds.episodes])
    return s, g, a


def holdout_split(n: int, every: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n)
    held = idx % every == 0
    return idx[~held], idx[held]


def train_ae(ds: Dataset, cfg: AEConfig, seed: int, sim_params: sim.SimParams | None = None):
    """Reconstruction + KL training; returns (model, report)."""
    t0 = time.time()
    ae = ActionAE.init(cfg, seed, sim_params)
    s, g, a = transition_arrays(ds)
    train_idx, _ = holdout_split(len(s), cfg.holdout_every)
    enc_in_all = np.concatenate([local_state_features(s), goal_features(s, g)], axis=-1)
    loc_all = local_state_features(s)

    opt = tl.Adam(ae.params, lr=cfg.lr, warmup_steps=cfg.warmup_steps, decay_steps=cfg.steps)
    rng = make_rng(seed, 11)
    losses, recons, kls = [], [], []
    for step_i in range(cfg.steps):
        batch = rng.choice(train_idx, size=cfg.batch, replace=False)
        enc_in = tl.constant(enc_in_all[batch])
        mean, logvar = ae.encode_graph(enc_in)
        # Reconstruction goes through the posterior mean (the same z that is
        # stored in pass 2); the KL term alone regularizes (mean, logvar).
        dec_in = tl.concat([tl.constant(loc_all[batch]), mean], axis=-1)
        pred = ae.decode_graph(dec_in)
        err = tl.sub(pred, tl.constant(a[batch]))
        recon = tl.tmean(tl.mul(err, err))
        if cfg.beta_kl > 0:
            kl_terms = tl.sub(
                tl.scale(tl.add(tl.mul(mean, mean), tl.exp(logvar)), 0.5),
                tl.scale(tl.add_const(logvar, 1.0), 0.5),
            )
            kl = tl.tmean(tl.tsum(kl_terms, axis=-1))
            loss = tl.add(recon, tl.scale(kl, cfg.beta_kl))
            kl_val = float(kl.data)
        else:
            loss = recon
            kl_val = 0.0
        if not np.isfinite(float(loss.data)):
            raise RuntimeError(f"AE training diverged at step {step_i}: loss={float(loss.data)}")
        opt.zero_grad()
        tl.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        recons.append(float(recon.data))
        kls.append(kl_val)

    report = {
        "steps": cfg.steps,
        "final_loss": float(np.mean(losses[-50:])),
        "final_recon": float(np.mean(recons[-50:])),
        "final_kl": float(np.mean(kls[-50:])),
        "action_variance": float(a[train_idx].var(axis=0).mean()),
        "train_seconds": time.time() - t0,
    }
    return ae, report


def fill_latents(ds: Dataset, ae: ActionAE) -> Dataset:
    """Pass 2: posterior-mean z for every stored transition."""
    for ep in ds.episodes:
        ep.latents = ae.encode_mean(ep.states[:-1], ep.states[1:]).astype(np.float64)
    return ds


def tracking_eval(ds: Dataset, ae: ActionAE, params: sim.SimParams | None = None) -> dict:
    """One-step tracking on held-out tuples.

    A tuple passes when, for every field group, the error between the
    replayed next state (using the decoded round-trip action) and the true
    next state stays below 5% of that group's scale. Scale is the per-group
    RMS spread of field values over the held-out set (floored at 0.05).
    """
    params = params or ae.sim_params
    s, g, a = transition_arrays(ds)
    _, held = holdout_split(len(s), ae.cfg.holdout_every)
    s, g = s[held], g[held]
    z = ae.encode_mean(s, g)
    dec = ae.decode(s, z)
    state = sim.SimState.from_flat(s)
    act = sim.Action.from_flat(dec)
    pred = sim.step(state, act, params).flat()

    groups = {
        "pos": slice(0, 2),
        "heading": slice(2, 4),
        "vel": slice(4, 6),
        "omega": slice(6, 7),
        "q": slice(7, 9),
        "qd": slice(9, 11),
    }
    ok = np.ones(len(s), dtype=bool)
    per_group = {}
    for name, sl in groups.items():
        scale = max(float(np.sqrt(g[:, sl].var(axis=0).mean())), 0.05)
        err = np.linalg.norm(pred[:, sl] - g[:, sl], axis=-1)
        per_group[name] = {"scale": scale, "p95_err": float(np.quantile(err, 0.95))}
        ok &= err <= 0.05 * scale
    return {
        "n_holdout": int(len(s)),
        "pass_fraction": float(ok.mean()),
        "groups": per_group,
    }
