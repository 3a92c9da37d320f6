#!/usr/bin/env python3
"""Bring-up: build (and cache) a full bundle, then probe rollout behavior.

Usage: python3 scripts/bringup.py [--tag mid] [--episodes 150] [--steps 2500]
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from planarpilot import expert, latent, sampler, sim, tasks
from planarpilot import model as M

CACHE = Path(__file__).resolve().parent.parent / ".cache"


def build_bundle(tag: str, n_episodes: int, steps: int, raw: bool = False, seed: int = 0):
    tagdir = CACHE / tag
    data_dir = tagdir / "data"
    ae_dir = tagdir / "ae"
    model_dir = tagdir / ("model_raw" if raw else "model")
    if not (data_dir / "episodes.jsonl").exists():
        t0 = time.time()
        ds = expert.curate(expert.CurationConfig(n_episodes=n_episodes), seed=seed)
        print(f"curated {ds.n_frames()} frames in {time.time()-t0:.1f}s (discarded {ds.discarded})")
        expert.save_dataset(ds, data_dir)
    ds = expert.load_dataset(data_dir)
    if not (ae_dir / "manifest.json").exists():
        t0 = time.time()
        ae, rep = latent.train_ae(ds, latent.AEConfig(), seed=seed)
        print(f"AE trained in {time.time()-t0:.1f}s: {json.dumps({k: round(v,6) if isinstance(v,float) else v for k,v in rep.items()})}")
        ae.save(ae_dir)
        (ae_dir / "report.json").write_text(json.dumps(rep))
    ae = latent.ActionAE.load(ae_dir)
    if ds.episodes[0].latents is None:
        latent.fill_latents(ds, ae)
        expert.save_dataset(ds, data_dir)
        ds = expert.load_dataset(data_dir)
    if not (model_dir / "manifest.json").exists():
        toks, labels, _ = expert.window_tokens(ds, use_latents=not raw)
        cfg = M.ModelConfig(steps=steps, action_repr="raw" if raw else "latent", seed=seed)
        t0 = time.time()
        model, rep = M.train_model(toks, labels, cfg)
        print(f"model trained in {time.time()-t0:.0f}s: ratio {rep['loss_ratio']:.3f} "
              f"(untrained {rep['untrained_loss']:.3f} final {rep['final_loss']:.3f})")
        model.save(model_dir, extra=rep)
    model = M.BehaviorModel.load(model_dir)
    return ds, ae, model


def probe_unconditional(model, ae, stab, n=8, max_steps=600, kind="autoregressive"):
    cfg = sampler.SamplerConfig(schedule_kind=kind, stabilization=stab)
    eps = [sampler.EpisodeSpec(seed=1000 + i, init_state=sim.reset(seed=1000 + i, spec=sim.InitSpec(randomize=True)), max_steps=max_steps) for i in range(n)]
    logs, stats = sampler.rollout_batch(model, ae, cfg, eps, record_latents=False)
    lens = [l.length for l in logs]
    print(f"  uncond {kind} stab={stab}: lengths {lens} mean {np.mean(lens):.0f} "
          f"steps/s {stats['steps_per_second']:.1f}")
    return lens


def probe_conditioned(model, ae, name, n=6, steps=150):
    cfg = sampler.SamplerConfig(schedule_kind="autoregressive", stabilization=3)
    eps = [sampler.EpisodeSpec(seed=2000 + i, instruction=name,
                               init_state=sim.reset(seed=2000 + i, spec=sim.InitSpec(randomize=True)),
                               max_steps=steps) for i in range(n)]
    logs, _ = sampler.rollout_batch(model, ae, cfg, eps, record_latents=False)
    omegas = [float(l.states[:, 6].mean()) for l in logs]
    speeds = [float(np.linalg.norm(l.states[:, 4:6], axis=1).mean()) for l in logs]
    print(f"  cond={name}: mean omega {np.round(omegas,2)} mean speed {np.round(speeds,2)}")
    return omegas, speeds


def probe_goal(model, ae, lam, n_samples, n=10, mode="near", style="walk-forward"):
    cfg = sampler.SamplerConfig(
        schedule_kind="gradual", horizon=28, exec_steps=8, stabilization=5,
        guidance_strength=lam, mcg_samples=n_samples,
    )
    eps = []
    for i in range(n):
        task, init = tasks.spawn_task("goal", 3000 + i, mode=mode)
        eps.append(sampler.EpisodeSpec(seed=3000 + i, init_state=init, instruction=style,
                                       task=task, max_steps=task.budget))
    logs, stats = sampler.rollout_batch(model, ae, cfg, eps, record_latents=False)
    succ = [l.outcome == "success" for l in logs]
    tt = [l.length for l in logs]
    print(f"  goal {mode} lam={lam} N={n_samples}: SR {np.mean(succ):.2f} steps {tt} steps/s {stats['steps_per_second']:.1f}")
    return np.mean(succ)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--tag", default="mid")
    ap.add_argument("--episodes", type=int, default=150)
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--raw", action="store_true")
    ap.add_argument("--probe", default="uncond,cond,goal")
    args = ap.parse_args()

    ds, ae, model = build_bundle(args.tag, args.episodes, args.steps, raw=args.raw)
    probes = args.probe.split(",")
    if "uncond" in probes:
        print("unconditional rollouts:")
        probe_unconditional(model, ae, stab=3)
        probe_unconditional(model, ae, stab=0)
    if "cond" in probes:
        print("conditioned rollouts:")
        probe_conditioned(model, ae, "turn-left")
        probe_conditioned(model, ae, "turn-right")
        probe_conditioned(model, ae, "jog-forward")
        probe_conditioned(model, ae, "stand")
    if "goal" in probes:
        print("goal guidance:")
        probe_goal(model, ae, lam=0.1, n_samples=3)
