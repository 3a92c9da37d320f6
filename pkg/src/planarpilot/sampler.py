"""Guided receding-horizon control with per-frame denoising schedules.

Each replanning round assembles a window of h executed history frames plus
H noise-initialized future frames, walks a denoising matrix row by row
(model prediction -> classifier-free combination -> loss-guided correction
-> per-frame DDIM move to the next row's levels), decodes the first T_a
future action representations, executes them closed-loop in the simulator,
and shifts the window. History frames always carry the simulator's executed
states; the stabilization trick only raises their noise *indicator* so the
model treats them as slightly noisy - the data itself is never touched.

The engine runs a batch of episodes in lockstep, compacting finished ones
out. Per-episode RNG streams keep each episode's draws independent of the
batch composition, so results are deterministic per (seed, config).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import features, sim
from . import tasks as tasks_mod
from . import tensorlib as tl
from .latent import ActionAE
from .logs import EpisodeLog
from .model import NULL_COND, BehaviorModel, cond_id, forward_diffuse
from .rng import make_rng

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("full-sequence", "autoregressive", "gradual")


@dataclass
class SamplerConfig:
    context: int = 4               # h: executed history frames in the window
    horizon: int = 8               # H: future frames denoised per round
    exec_steps: int = 8            # T_a: decoded actions executed per round
    schedule_kind: str = "autoregressive"
    ddim_steps: int = 5            # M_d
    cfg_strength: float = 2.0      # lambda_c
    guidance_strength: float = 0.0  # lambda_l
    mcg_samples: int = 1           # N
    stabilization: int = 3         # n
    guidance_mode: str = "prediction"  # or "input"
    init_noise_scale: float = 1.0

    def validate(self, model_window: int, k_max: int) -> None:
        if self.context + self.horizon > model_window:
            raise ValueError(f"h + H = {self.context + self.horizon} exceeds T = {model_window}")
        if not (1 <= self.exec_steps <= self.horizon):
            raise ValueError("need 1 <= T_a <= H")
        if not (0 <= self.stabilization <= k_max):
            raise ValueError("stabilization level out of range")
        if self.mcg_samples < 1:
            raise ValueError("MCG sample count must be >= 1")
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.schedule_kind!r}")
        if self.guidance_mode not in ("prediction", "input"):
            raise ValueError(f"unknown guidance mode {self.guidance_mode!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# ---------------------------------------------------------------------------
# denoising plan primitives


def ddim_levels(k_max: int, m_d: int) -> np.ndarray:
    """Evenly spaced call levels from K toward 0; 0 itself is the post-loop
    target, not a call level."""
    return np.round(np.linspace(k_max, 0, m_d + 1)).astype(int)[:m_d]


def build_denoise_matrix(kind: str, t: int, h: int, horizon: int, m_d: int, k_max: int) -> np.ndarray:
    """Per-frame noise-level plan, shape (M, t); rows are processed from
    index M-1 down to 0.

    Future column j starts its M_d-level descent at a kind-dependent offset
    (all at once / strictly one frame at a time / a one-row staircase);
    before that it waits at K, afterwards it sits at 0 and is presented to
    the model through the stabilization indicator. History columns (the
    first h) are always 0. Columns beyond h + horizon stay untouched at K.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if h + horizon > t:
        raise ValueError("h + H must fit in t")
    if m_d < 1 or horizon < 1:
        raise ValueError("need at least one denoise step and one future frame")
    ladder = ddim_levels(k_max, m_d)
    if kind == "full-sequence":
        starts = np.zeros(horizon, dtype=int)
        m = m_d
    elif kind == "autoregressive":
        starts = np.arange(horizon) * m_d
        m = horizon * m_d
    else:  # gradual staircase
        starts = np.arange(horizon)
        m = m_d + horizon - 1
    mat = np.zeros((m, t), dtype=int)
    for j in range(horizon):
        col = np.zeros(m, dtype=int)
        for i in range(m):  # i = processing order; row index is m-1-i
            if i < starts[j]:
                col[i] = k_max
            elif i < starts[j] + m_d:
                col[i] = ladder[i - starts[j]]
            else:
                col[i] = 0
        mat[::-1, h + j] = col
    if t > h + horizon:
        mat[:, h + horizon:] = k_max
    return mat


def stabilize_row(row: np.ndarray, n: int) -> np.ndarray:
    """Replace zero level indicators with n; data tensors are never touched."""
    return np.where(row == 0, n, row)


def cfg_combine(pred_uncond: np.ndarray, pred_cond: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0.0:  # the lambda in {0, 1} identities hold exactly
        return pred_uncond
    if lam == 1.0:
        return pred_cond
    return pred_uncond + lam * (pred_cond - pred_uncond)


def ddim_update(x_from: np.ndarray, x0: np.ndarray, k_from: np.ndarray, k_to: np.ndarray,
                sched) -> np.ndarray:
    """Deterministic per-frame level move under the clean-sequence
    parameterization; frames with k_to == k_from pass through unchanged
    (this pins the history frames, which sit at level 0 throughout)."""
    k_from = np.asarray(k_from)
    k_to = np.asarray(k_to)
    if np.any(k_to > k_from):
        raise ValueError("ddim_update cannot raise a frame's noise level")
    a_from = sched.abar[k_from][..., None]
    a_to = sched.abar[k_to][..., None]
    same = (k_from == k_to)[..., None]
    denom = np.sqrt(np.maximum(1.0 - a_from, 1e-12))
    eps_hat = (x_from - np.sqrt(a_from) * x0) / denom
    moved = np.sqrt(a_to) * x0 + np.sqrt(1.0 - a_to) * eps_hat
    return np.where(same, x_from, moved)


# ---------------------------------------------------------------------------
# guided correction


def guided_correction(x0: np.ndarray, loss_graph, lam: float, n_samples: int,
                      sample_prediction, mode: str = "prediction") -> np.ndarray:
    """Monte-Carlo loss-guided correction of the combined prediction.

    Each of the N draws re-noises x0 to the current row's levels with fresh
    noise and re-predicts; the task-loss gradient is averaged over the draws
    and one descent step of size lam is applied to x0. In prediction mode
    the gradient is taken at the re-predicted window; in input mode it is
    backpropagated through the model to the re-noised input. A non-finite
    gradient skips the correction for this row.
    """
    if lam == 0.0:
        return x0
    total = np.zeros_like(x0)
    for _ in range(n_samples):
        if mode == "prediction":
            pred_i = sample_prediction(x0, need_graph=False)
            leaf = tl.Tensor(np.asarray(pred_i), requires_grad=True)
            loss = loss_graph(leaf)
            tl.backward(loss)
            g = leaf.grad
        else:
            leaf, pred = sample_prediction(x0, need_graph=True)
            loss = loss_graph(pred)
            tl.backward(loss)
            g = leaf.grad
        if g is None or not np.all(np.isfinite(g)):
            log.warning("guidance gradient non-finite; correction skipped for this row")
            return x0
        total += g.astype(x0.dtype)
    return x0 - lam * (total / n_samples)


# ---------------------------------------------------------------------------
# episode specs and the batched engine


@dataclass
class EpisodeSpec:
    seed: int
    init_state: sim.SimState | None = None
    instruction: str | None = None
    # optional (step, instruction-or-None) timeline; applied at replanning
    instruction_schedule: list[tuple[int, str | None]] | None = None
    task: object | None = None
    max_steps: int = 300

    def instruction_at(self, step: int) -> str | None:
        name = self.instruction
        if self.instruction_schedule:
            for t, n in self.instruction_schedule:
                if step >= t:
                    name = n
                else:
                    break
        return name


@dataclass
class _EpisodeState:
    spec: EpisodeSpec
    state: sim.SimState
    rng: np.random.Generator
    cond: int
    hist_states: np.ndarray   # (h+1, 11)
    hist_acts: np.ndarray     # (h, act_dim)
    steps: int = 0
    outcome: str | None = None
    rows_states: list = field(default_factory=list)
    rows_actions: list = field(default_factory=list)
    rows_latents: list = field(default_factory=list)
    rows_instr: list = field(default_factory=list)
    rows_metrics: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    instr_name: str | None = None


class BatchRollout:
    """Lockstep rollout of many episodes sharing one model and config."""

    def __init__(self, model: BehaviorModel, ae: ActionAE | None, cfg: SamplerConfig,
                 episodes: list[EpisodeSpec], sim_params: sim.SimParams | None = None,
                 weights: tasks_mod.GuidanceWeights | None = None, record_latents: bool = True):
        cfg.validate(model.cfg.window, model.cfg.k_max)
        self.model = model
        self.ae = ae
        self.cfg = cfg
        self.params = sim_params or (ae.sim_params if ae is not None else sim.SimParams())
        self.weights = weights or tasks_mod.GuidanceWeights()
        self.record_latents = record_latents
        self.act_dim = model.token_dim - features.STATE_FEAT
        if ae is not None and ae.cfg.d_z != self.act_dim:
            raise ValueError("decoder latent size does not match the model's action slice")
        self.kmat = build_denoise_matrix(
            cfg.schedule_kind, cfg.context + cfg.horizon, cfg.context, cfg.horizon,
            cfg.ddim_steps, model.cfg.k_max,
        )
        self.eps: list[_EpisodeState] = [self._init_episode(s) for s in episodes]
        self.model_calls = 0
        self.executed_steps = 0

    # -- setup --

    def _init_episode(self, spec: EpisodeSpec) -> _EpisodeState:
        state = spec.init_state.copy() if spec.init_state is not None else sim.reset()
        h = self.cfg.context
        flat = state.flat()
        hist_states = np.tile(flat, (h + 1, 1))
        if self.ae is not None:
            z0 = self.ae.encode_mean(flat[None, :], flat[None, :])[0]
            hist_acts = np.tile(z0, (h, 1))
        else:
            hist_acts = np.zeros((h, self.act_dim))
        name = spec.instruction_at(0)
        ep = _EpisodeState(
            spec=spec,
            state=state,
            rng=make_rng(spec.seed, 50),
            cond=cond_id(name),
            hist_states=hist_states,
            hist_acts=hist_acts,
            instr_name=name,
        )
        if spec.task is not None:
            out = spec.task.outcome(flat, 0)
            if out is not None:
                ep.outcome = out
                ep.events.append((0, "goal-reached" if out == "success" else out))
        return ep

    # -- helpers --

    def active(self) -> list[_EpisodeState]:
        return [e for e in self.eps if e.outcome is None and e.steps < e.spec.max_steps]

    def _windows(self, active: list[_EpisodeState]):
        h, hor = self.cfg.context, self.cfg.horizon
        toks, anchors = [], []
        for e in active:
            tok, anchor = features.canonicalize(e.hist_states, e.hist_acts)
            toks.append(tok)
            anchors.append(anchor)
        hist = self.model.normalizer.apply(np.stack(toks)).astype(np.float32)
        future = np.stack(
            [e.rng.standard_normal((hor, self.model.token_dim)) for e in active]
        ).astype(np.float32) * self.cfg.init_noise_scale
        return np.concatenate([hist, future], axis=1), anchors

    def _predict(self, window: np.ndarray, k_call: np.ndarray, conds: np.ndarray) -> np.ndarray:
        b = window.shape[0]
        lam = self.cfg.cfg_strength
        conditioned = np.any(conds != NULL_COND)
        if not conditioned:
            self.model_calls += b
            return self.model.predict(window, k_call, conds)
        if lam == 1.0:
            self.model_calls += b
            return self.model.predict(window, k_call, conds)
        stacked = np.concatenate([window, window])
        ks = np.concatenate([k_call, k_call])
        cs = np.concatenate([np.full(b, NULL_COND), conds])
        self.model_calls += 2 * b
        both = self.model.predict(stacked, ks, cs)
        return cfg_combine(both[:b], both[b:], lam)

    def _world_graph(self, anchors: list[features.Anchor]):
        """Tensor pipeline from a normalized-window leaf to world quantities
        of the future frames (for guidance gradients)."""
        h, hor = self.cfg.context, self.cfg.horizon
        b = len(anchors)
        nm = self.model.normalizer
        std = tl.constant(np.broadcast_to(nm.std[self.act_dim:], (b, hor, features.STATE_FEAT)).copy())
        mean = tl.constant(np.broadcast_to(nm.mean[self.act_dim:], (b, hor, features.STATE_FEAT)).copy())
        rots = tl.constant(np.stack([a.rot_to_local() for a in anchors]))  # (b, 2, 2)
        apos = tl.constant(np.broadcast_to(np.stack([a.pos for a in anchors])[:, None, :], (b, hor, 2)).copy())

        def world(leaf: tl.Tensor) -> dict:
            fut = tl.narrow(leaf, 1, h, hor)
            feats = tl.add(tl.mul(tl.narrow(fut, 2, self.act_dim, features.STATE_FEAT), std), mean)
            pos_c = tl.narrow(feats, 2, 0, 2)
            head_c = tl.narrow(feats, 2, 2, 2)
            vel_c = tl.narrow(feats, 2, 4, 2)
            return {
                "pos": tl.add(tl.matmul(pos_c, rots), apos),
                "heading": tl.matmul(head_c, rots),
                "vel": tl.matmul(vel_c, rots),
            }

        return world

    def _loss_graph(self, active: list[_EpisodeState], anchors):
        tasks = [e.spec.task for e in active]
        if any(t is None for t in tasks):
            return None
        kinds = {t.kind for t in tasks}
        if len(kinds) != 1:
            raise ValueError("all batched episodes must share one task kind")
        kind = kinds.pop()
        world_fn = self._world_graph(anchors)

        def loss_graph(pred_tensor: tl.Tensor) -> tl.Tensor:
            return tasks_mod.batched_guidance_loss(
                kind, tasks, world_fn(pred_tensor), self.weights,
                self.cfg.horizon, self.params.dt,
            )

        return loss_graph

    # -- one replanning + execution block --

    def run_block(self) -> bool:
        """Plan and execute one T_a block; returns False when all done."""
        active = self.active()
        if not active:
            return False
        cfg = self.cfg
        h, hor = cfg.context, cfg.horizon
        # instruction changes land exactly at replanning boundaries
        for e in active:
            name = e.spec.instruction_at(e.steps)
            if name != e.instr_name:
                e.instr_name = name
                e.cond = cond_id(name)
                e.events.append((e.steps, "instruction-change"))

        window, anchors = self._windows(active)
        conds = np.array([e.cond for e in active])
        loss_graph = self._loss_graph(active, anchors)
        b = len(active)
        m = self.kmat.shape[0]
        for mrow in range(m - 1, -1, -1):
            k_row = self.kmat[mrow]
            k_call = np.tile(stabilize_row(k_row, cfg.stabilization), (b, 1))
            k_nominal = np.tile(k_row, (b, 1))
            x0 = self._predict(window, k_call, conds)
            if loss_graph is not None and cfg.guidance_strength > 0:
                def sample_prediction(x0_in, need_graph: bool):
                    eps = np.stack(
                        [e.rng.standard_normal((h + hor, self.model.token_dim)) for e in active]
                    )
                    renoised = forward_diffuse(x0_in, k_nominal, eps, self.model.sched).astype(np.float32)
                    if need_graph:
                        leaf = tl.Tensor(renoised, requires_grad=True)
                        pred = self.model.forward_graph(leaf, k_call, conds)
                        self.model_calls += b
                        return leaf, pred
                    self.model_calls += b
                    return self.model.predict(renoised, k_call, conds)

                x0 = guided_correction(
                    x0, loss_graph, cfg.guidance_strength, cfg.mcg_samples,
                    sample_prediction, mode=cfg.guidance_mode,
                ).astype(np.float32)
                if cfg.guidance_mode == "input":
                    for p in self.model.params.values():
                        p.grad = None
            k_next = self.kmat[mrow - 1] if mrow > 0 else np.zeros_like(k_row)
            window = ddim_update(window, x0, k_nominal, np.tile(k_next, (b, 1)), self.model.sched)

        # decode and execute the first T_a future frames, closed loop
        denormed = self.model.normalizer.invert(window.astype(np.float64))
        batch_states = sim.stack_states([e.state for e in active])
        lim = self.params.joint_limit
        act_lo = np.array([-1.0, -1.0, -lim, -lim])
        act_hi = np.array([1.0, 1.0, lim, lim])
        for i in range(cfg.exec_steps):
            tok_i = denormed[:, h + i, :]
            act_feats = tok_i[:, : self.act_dim]
            flat = batch_states.flat()
            if self.ae is not None:
                act_arr = self.ae.decode(flat, act_feats)
                z_rec = act_feats
            else:
                act_arr = act_feats
                z_rec = None
            act_exec = np.clip(act_arr, act_lo, act_hi)
            dead = np.array([e.outcome is not None or e.steps >= e.spec.max_steps for e in active])
            act_exec[dead] = 0.0
            next_states = sim.step(batch_states, sim.Action.from_flat(act_exec), self.params)
            fallen = sim.is_fallen(next_states, self.params)
            for j, e in enumerate(active):
                if e.outcome is not None or e.steps >= e.spec.max_steps:
                    continue
                e.rows_states.append(flat[j].copy())
                e.rows_actions.append(act_exec[j].copy())
                if self.record_latents and z_rec is not None:
                    e.rows_latents.append(z_rec[j].copy())
                e.rows_instr.append(e.instr_name)
                if e.spec.task is not None:
                    for k, v in e.spec.task.frame_metrics(flat[j]).items():
                        e.rows_metrics.setdefault(k, []).append(v)
                e.state = next_states.select(j)
                e.hist_states = np.concatenate([e.hist_states[1:], e.state.flat()[None]], axis=0)
                e.hist_acts = np.concatenate([e.hist_acts[1:], act_feats[j][None]], axis=0)
                e.steps += 1
                self.executed_steps += 1
                if e.spec.task is not None:
                    e.spec.task.update(e.state.flat(), self.params.dt)
                # events attach to the frame just executed (row e.steps - 1)
                if bool(fallen[j]):
                    e.outcome = "fall"
                    e.events.append((e.steps - 1, "fall"))
                    continue
                if e.spec.task is not None:
                    out = e.spec.task.outcome(e.state.flat(), e.steps)
                    if out is not None:
                        e.outcome = out
                        e.events.append((e.steps - 1, "goal-reached" if out == "success" else out))
            batch_states = next_states
        return True

    def run(self) -> list[EpisodeLog]:
        t0 = time.perf_counter()
        while self.run_block():
            pass
        self.wall_seconds = time.perf_counter() - t0
        return [self._finish(e) for e in self.eps]

    def _finish(self, e: _EpisodeState) -> EpisodeLog:
        outcome = e.outcome if e.outcome is not None else "budget"
        snap = {
            "sampler": self.cfg.to_dict(),
            "sim_params": self.params.to_dict(),
            "task": e.spec.task.snapshot() if e.spec.task is not None else None,
            "instruction": e.spec.instruction,
            "instruction_schedule": e.spec.instruction_schedule,
            "max_steps": e.spec.max_steps,
            "action_repr": self.model.cfg.action_repr,
        }
        d = self.model.token_dim - features.STATE_FEAT
        return EpisodeLog(
            seed=e.spec.seed,
            config_snapshot=snap,
            states=np.array(e.rows_states) if e.rows_states else np.zeros((0, sim.STATE_DIM)),
            actions=np.array(e.rows_actions) if e.rows_actions else np.zeros((0, 4 if self.ae else d)),
            latents=np.array(e.rows_latents) if e.rows_latents else None,
            instructions=e.rows_instr,
            metrics={k: np.array(v) for k, v in e.rows_metrics.items()},
            events=e.events,
            final_state=e.state.flat(),
            outcome=outcome,
        )


def rollout_batch(model, ae, cfg: SamplerConfig, episodes: list[EpisodeSpec], *,
                  sim_params=None, weights=None, record_latents=True):
    """Convenience wrapper; returns (logs, stats)."""
    eng = BatchRollout(model, ae, cfg, episodes, sim_params, weights, record_latents)
    logs = eng.run()
    stats = {
        "wall_seconds": eng.wall_seconds,
        "executed_steps": eng.executed_steps,
        "steps_per_second": eng.executed_steps / max(eng.wall_seconds, 1e-9),
        "model_calls": eng.model_calls,
    }
    return logs, stats


def rollout_episode(model, ae, cfg: SamplerConfig, *, seed: int, instruction=None,
                    instruction_schedule=None, task=None, init_state=None,
                    max_steps=300, sim_params=None, weights=None) -> EpisodeLog:
    spec = EpisodeSpec(
        seed=seed,
        init_state=init_state,
        instruction=instruction,
        instruction_schedule=instruction_schedule,
        task=task,
        max_steps=max_steps,
    )
    logs, _ = rollout_batch(model, ae, cfg, [spec], sim_params=sim_params, weights=weights)
    return logs[0]
