"""Metrics, seeded task batteries, robustness runs, and the ablation grid.

Every battery is deterministic from its seed list: episodes get per-seed
RNG streams and results are aggregated in seed order, so re-running a
command with the same seed file reproduces results.json byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim, tasks
from .latent import ActionAE
from .logs import EpisodeLog
from .model import BehaviorModel
from .sampler import EpisodeSpec, SamplerConfig, rollout_batch


def jerk(log: EpisodeLog, dt: float | None = None) -> float:
    """Mean norm of the third finite difference of root position / dt^3."""
    pos = log.positions()
    if pos.shape[0] < 4:
        raise ValueError("jerk needs at least 4 positions")
    if dt is None:
        dt = log.config_snapshot.get("sim_params", {}).get("dt", 1.0 / 30.0)
    d3 = np.diff(pos, n=3, axis=0)
    return float(np.linalg.norm(d3, axis=1).mean() / dt**3)


def mean_jerk(logs: list[EpisodeLog]) -> float:
    vals = [jerk(l) for l in logs if l.positions().shape[0] >= 4]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# task batteries


@dataclass
class Bundle:
    model: BehaviorModel
    ae: ActionAE | None

    @property
    def sim_params(self) -> sim.SimParams:
        return self.ae.sim_params if self.ae is not None else sim.SimParams()


GOAL_SAMPLER = dict(schedule_kind="gradual", horizon=28, exec_steps=8, stabilization=5,
                    guidance_strength=0.15, mcg_samples=3)
VEL_SAMPLER = dict(schedule_kind="gradual", horizon=28, exec_steps=8, stabilization=5,
                   guidance_strength=0.05, mcg_samples=3)
OBS_SAMPLER = dict(schedule_kind="gradual", horizon=28, exec_steps=8, stabilization=5,
                   guidance_strength=0.2, mcg_samples=3)
TEXT_SAMPLER = dict(schedule_kind="autoregressive", horizon=8, exec_steps=8, stabilization=3)


def eval_goal(bundle: Bundle, seeds: list[int], mode: str = "near", style: str | None = "walk-forward",
              sampler_overrides: dict | None = None) -> dict:
    cfg = SamplerConfig(**{**GOAL_SAMPLER, **(sampler_overrides or {})})
    specs = []
    for s in seeds:
        task, init = tasks.spawn_task("goal", s, mode=mode)
        specs.append(EpisodeSpec(seed=s, init_state=init, instruction=style, task=task,
                                 max_steps=task.budget))
    logs, stats = rollout_batch(bundle.model, bundle.ae, cfg, specs,
                                sim_params=bundle.sim_params, record_latents=False)
    succ = np.array([l.outcome == "success" for l in logs])
    times = [l.length for l, ok in zip(logs, succ) if ok]
    return {
        "mode": mode,
        "style": style,
        "episodes": len(seeds),
        "success_rate": float(succ.mean()),
        "mean_time_to_goal": float(np.mean(times)) if times else None,
        "mean_jerk": mean_jerk(logs),
        "steps_per_second": stats["steps_per_second"],
        "outcomes": {o: int(sum(1 for l in logs if l.outcome == o)) for o in set(l.outcome for l in logs)},
    }


def eval_velocity(bundle: Bundle, seed: int, style: str | None = None,
                  sampler_overrides: dict | None = None) -> dict:
    cfg = SamplerConfig(**{**VEL_SAMPLER, **(sampler_overrides or {})})
    task, init = tasks.spawn_task("velocity", seed)
    spec = EpisodeSpec(seed=seed, init_state=init, instruction=style, task=task,
                       max_steps=task.total_steps)
    logs, stats = rollout_batch(bundle.model, bundle.ae, cfg, [spec],
                                sim_params=bundle.sim_params, record_latents=False)
    log = logs[0]
    err = velocity_tracking_error(log, task)
    return {
        "episodes": 1,
        "transitions": len(task.targets),
        "tracking_error": err,
        "mean_jerk": mean_jerk(logs),
        "steps_per_second": stats["steps_per_second"],
        "completed_steps": log.length,
    }


def velocity_tracking_error(log: EpisodeLog, task: tasks.VelocityTask) -> float:
    """Mean ||v - v_target|| outside the per-transition settling window."""
    errs = []
    for t in range(log.length):
        if (t % task.hold_steps) < task.transition_steps:
            continue
        tgt = task.targets[min(t // task.hold_steps, len(task.targets) - 1)]
        errs.append(np.linalg.norm(log.states[t, 4:6] - tgt))
    return float(np.mean(errs)) if errs else float("nan")


def eval_obstacle(bundle: Bundle, seeds: list[int], style: str | None = "walk-forward",
                  sampler_overrides: dict | None = None) -> dict:
    cfg = SamplerConfig(**{**OBS_SAMPLER, **(sampler_overrides or {})})
    specs = []
    for s in seeds:
        task, init = tasks.spawn_task("obstacle", s)
        spawn_dist = float(np.linalg.norm(task.center - init.pos))
        specs.append(EpisodeSpec(seed=s, init_state=init, instruction=style, task=task,
                                 max_steps=task.budget))
        assert 1.5 < spawn_dist < 2.5, "obstacle spawn distance out of protocol"
    logs, stats = rollout_batch(bundle.model, bundle.ae, cfg, specs,
                                sim_params=bundle.sim_params, record_latents=False)
    outcomes = [l.outcome for l in logs]
    return {
        "episodes": len(seeds),
        "success_rate": float(np.mean([o == "success" for o in outcomes])),
        "failures": {
            "collision": int(sum(1 for o in outcomes if o == "collision")),
            "fall": int(sum(1 for o in outcomes if o == "fall")),
            "timeout": int(sum(1 for o in outcomes if o == "budget")),
        },
        "mean_jerk": mean_jerk(logs),
        "steps_per_second": stats["steps_per_second"],
    }


def robustness(bundle: Bundle, seeds: list[int], *, schedule_kind: str = "autoregressive",
               stabilization: int = 3, cap: int = 3000,
               sampler_overrides: dict | None = None) -> dict:
    """Unconditional rollouts until fall or cap; lengths and throughput."""
    overrides = dict(schedule_kind=schedule_kind, stabilization=stabilization,
                     horizon=8, exec_steps=8)
    overrides.update(sampler_overrides or {})
    cfg = SamplerConfig(**{**TEXT_SAMPLER, **overrides})
    specs = [EpisodeSpec(seed=s, init_state=sim.reset(seed=s, spec=sim.InitSpec(randomize=True)),
                         instruction=None, max_steps=cap) for s in seeds]
    logs, stats = rollout_batch(bundle.model, bundle.ae, cfg, specs,
                                sim_params=bundle.sim_params, record_latents=False)
    lens = np.array([l.length for l in logs])
    return {
        "episodes": len(seeds),
        "schedule": schedule_kind,
        "stabilization": stabilization,
        "action_repr": bundle.model.cfg.action_repr,
        "mean_length": float(lens.mean()),
        "max_length": int(lens.max()),
        "cap": cap,
        "capped_fraction": float((lens >= cap).mean()),
        "steps_per_second": stats["steps_per_second"],
        "mean_jerk": mean_jerk(logs),
    }


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class ResultTable:
    rows: dict[str, dict]
    meta: dict

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": self.rows}, indent=1, sort_keys=True)

    def to_text(self) -> str:
        cols: list[str] = []
        for r in self.rows.values():
            for c in r:
                if c not in cols:
                    cols.append(c)
        widths = {c: max(len(c), 12) for c in cols}
        name_w = max((len(n) for n in self.rows), default=8)
        lines = [" " * name_w + "  " + "  ".join(c.rjust(widths[c]) for c in cols)]
        for name, r in self.rows.items():
            cells = []
            for c in cols:
                v = r.get(c, "-")
                if isinstance(v, float):
                    v = f"{v:.3f}"
                cells.append(str(v).rjust(widths[c]))
            lines.append(name.ljust(name_w) + "  " + "  ".join(cells))
        return "\n".join(lines) + "\n"


def run_ablation(bundles: dict[str, Bundle], seeds: list[int], goal_seeds: list[int],
                 cap: int = 3000, mcg_counts: tuple[int, ...] = (1, 3, 5),
                 goal_mode: str = "far") -> ResultTable:
    """Robustness over {schedule} x {latent/raw} x {stabilization} plus the
    goal-success MCG sweep. Missing bundle variants mark their rows absent."""
    rows: dict[str, dict] = {}

    grid = [
        ("full-sequence/latent/stab", "latent", "full-sequence", 3),
        ("gradual/latent/stab", "latent", "gradual", 3),
        ("autoregressive/raw/unstab", "raw", "autoregressive", 0),
        ("autoregressive/raw/stab", "raw", "autoregressive", 3),
        ("autoregressive/latent/unstab", "latent", "autoregressive", 0),
        ("autoregressive/latent/stab", "latent", "autoregressive", 3),
    ]
    for name, repr_kind, kind, stab in grid:
        bundle = bundles.get(repr_kind)
        if bundle is None:
            rows[name] = {"absent": True}
            continue
        r = robustness(bundle, seeds, schedule_kind=kind, stabilization=stab, cap=cap)
        rows[name] = {
            "mean_length": r["mean_length"],
            "max_length": r["max_length"],
            "steps_per_second": r["steps_per_second"],
        }

    if "latent" in bundles:
        for n in mcg_counts:
            r = eval_goal(bundles["latent"], goal_seeds, mode=goal_mode,
                          sampler_overrides={"mcg_samples": n})
            rows[f"goal-mcg/N={n}"] = {
                "success_rate": r["success_rate"],
                "steps_per_second": r["steps_per_second"],
            }

    return ResultTable(rows=rows, meta={"seeds": seeds, "goal_seeds": goal_seeds, "cap": cap})


def write_results(out_dir: str | Path, payload: dict | ResultTable) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, ResultTable):
        (out / "results.json").write_text(payload.to_json())
        (out / "results.txt").write_text(payload.to_text())
        return
    (out / "results.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    lines = [f"{k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(payload.items())]
    (out / "results.txt").write_text("\n".join(lines) + "\n")
