"""Command-line entry points for the full pipeline."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import evalh, expert, latent, sampler, sim, tasks
from . import model as model_mod
from .config import RunConfig
from .logs import EpisodeLog


def read_seeds(path: str | None, fallback_base: int, count: int) -> list[int]:
    if path is None:
        return [fallback_base + i for i in range(count)]
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return [int(s) for s in json.loads(text)]
    return [int(line) for line in text.splitlines() if line.strip()]


@click.group()
def main():
    """Diffusion behavior planner-controller for a planar character."""


@main.command("config-dump")
@click.option("--out", type=click.Path(), required=True)
def config_dump(out):
    """Write the default run configuration to a JSON file."""
    RunConfig().save(out)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def curate(config_path, seed, out_dir):
    """Roll the scripted expert into a dataset (episodes.jsonl + windows)."""
    cfg = RunConfig.load(config_path)
    t0 = time.time()
    ds = expert.curate(cfg.curation, seed=seed, params=cfg.sim)
    expert.save_dataset(ds, out_dir)
    click.echo(
        f"curated {len(ds.episodes)} episodes / {ds.n_frames()} frames "
        f"({ds.discarded} discarded) in {time.time() - t0:.1f}s -> {out_dir}"
    )


@main.command("train-ae")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def train_ae(data_dir, out_dir, seed, config_path):
    """Train the latent-action autoencoder, then fill z for every tuple."""
    cfg = RunConfig.load(config_path)
    ds = expert.load_dataset(data_dir)
    ae, report = latent.train_ae(ds, cfg.ae, seed=seed, sim_params=cfg.sim)
    ae.save(out_dir)
    (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=1))
    latent.fill_latents(ds, ae)
    expert.save_dataset(ds, data_dir)
    click.echo(f"AE trained ({report['train_seconds']:.0f}s, recon {report['final_recon']:.2e}); "
               f"latents filled into {data_dir}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--ae", "ae_dir", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
def train(data_dir, ae_dir, out_dir, config_path, seed):
    """Train the behavior model on AE latents (or raw actions)."""
    cfg = RunConfig.load(config_path)
    if seed is not None:
        cfg.model.seed = seed
    ds = expert.load_dataset(data_dir)
    use_latents = cfg.model.action_repr == "latent"
    if use_latents and ds.episodes[0].latents is None:
        if ae_dir is None:
            raise click.UsageError("dataset has no latents; pass --ae or run train-ae first")
        ae = latent.ActionAE.load(ae_dir)
        latent.fill_latents(ds, ae)
    toks, labels, _ = expert.window_tokens(ds, use_latents=use_latents)
    model, report = model_mod.train_model(toks, labels, cfg.model)
    model.save(out_dir, extra=report)
    (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=1))
    click.echo(f"model trained in {report['train_seconds']:.0f}s: "
               f"loss ratio {report['loss_ratio']:.3f} -> {out_dir}")


def load_bundle(model_dir, ae_dir) -> evalh.Bundle:
    model = model_mod.BehaviorModel.load(model_dir)
    ae = latent.ActionAE.load(ae_dir) if ae_dir else None
    if model.cfg.action_repr == "latent" and ae is None:
        raise click.UsageError("latent-action model needs --ae")
    if model.cfg.action_repr == "raw":
        ae = None
    return evalh.Bundle(model=model, ae=ae)


TASK_PRESETS = {
    "none": evalh.TEXT_SAMPLER,
    "goal": evalh.GOAL_SAMPLER,
    "velocity": evalh.VEL_SAMPLER,
    "obstacle": evalh.OBS_SAMPLER,
}


@main.command()
@click.option("--model", "model_dir", type=click.Path(exists=True), required=True)
@click.option("--ae", "ae_dir", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--task", "task_kind", type=click.Choice(list(TASK_PRESETS)), default="none")
@click.option("--instruction", default=None, help="skill id, or omit for unconditioned")
@click.option("--seed", type=int, default=0)
@click.option("--steps", type=int, default=300)
@click.option("--out", "out_path", type=click.Path(), required=True)
def rollout(model_dir, ae_dir, config_path, task_kind, instruction, seed, steps, out_path):
    """Run one guided episode and write it as a JSON-lines log."""
    cfg = RunConfig.load(config_path)
    bundle = load_bundle(model_dir, ae_dir)
    overrides = {**TASK_PRESETS[task_kind], **cfg.task_samplers.get(task_kind, {})}
    scfg = sampler.SamplerConfig(**overrides)
    task = None
    init = None
    max_steps = steps
    if task_kind != "none":
        task, init = tasks.spawn_task(task_kind, seed)
        if task_kind == "goal":
            max_steps = min(steps, task.budget) if steps else task.budget
    log = sampler.rollout_episode(
        bundle.model, bundle.ae, scfg, seed=seed, instruction=instruction, task=task,
        init_state=init, max_steps=max_steps, sim_params=bundle.sim_params,
        weights=cfg.weights,
    )
    log.dump_jsonl(out_path)
    click.echo(f"episode: {log.length} steps, outcome {log.outcome} -> {out_path}")


@main.group("eval")
def eval_group():
    """Seeded evaluation batteries."""


def _eval_common(fn):
    fn = click.option("--model", "model_dir", type=click.Path(exists=True), required=True)(fn)
    fn = click.option("--ae", "ae_dir", type=click.Path(exists=True), default=None)(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True), default=None)(fn)
    fn = click.option("--seeds", "seeds_path", type=click.Path(exists=True), default=None)(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), required=True)(fn)
    return fn


@eval_group.command("goal")
@_eval_common
@click.option("--mode", type=click.Choice(["near", "far"]), default="near")
@click.option("--style", default="walk-forward")
def eval_goal_cmd(model_dir, ae_dir, config_path, seeds_path, out_dir, mode, style):
    cfg = RunConfig.load(config_path)
    bundle = load_bundle(model_dir, ae_dir)
    seeds = read_seeds(seeds_path, cfg.eval.base_seed, cfg.eval.goal_episodes)
    res = evalh.eval_goal(bundle, seeds, mode=mode, style=style or None,
                          sampler_overrides=cfg.task_samplers.get("goal"))
    res["seeds"] = seeds
    evalh.write_results(out_dir, res)
    click.echo(f"goal[{mode}] SR {res['success_rate']:.2f} -> {out_dir}")


@eval_group.command("velocity")
@_eval_common
def eval_velocity_cmd(model_dir, ae_dir, config_path, seeds_path, out_dir):
    cfg = RunConfig.load(config_path)
    bundle = load_bundle(model_dir, ae_dir)
    seeds = read_seeds(seeds_path, cfg.eval.base_seed, 1)
    res = evalh.eval_velocity(bundle, seeds[0],
                              sampler_overrides=cfg.task_samplers.get("velocity"))
    res["seeds"] = seeds[:1]
    evalh.write_results(out_dir, res)
    click.echo(f"velocity tracking error {res['tracking_error']:.3f} m/s -> {out_dir}")


@eval_group.command("obstacle")
@_eval_common
def eval_obstacle_cmd(model_dir, ae_dir, config_path, seeds_path, out_dir):
    cfg = RunConfig.load(config_path)
    bundle = load_bundle(model_dir, ae_dir)
    seeds = read_seeds(seeds_path, cfg.eval.base_seed, cfg.eval.obstacle_episodes)
    res = evalh.eval_obstacle(bundle, seeds,
                              sampler_overrides=cfg.task_samplers.get("obstacle"))
    res["seeds"] = seeds
    evalh.write_results(out_dir, res)
    click.echo(f"obstacle SR {res['success_rate']:.2f} -> {out_dir}")


@eval_group.command("robustness")
@_eval_common
@click.option("--schedule", type=click.Choice(list(sampler.SCHEDULE_KINDS)), default="autoregressive")
@click.option("--stabilization", type=int, default=3)
def eval_robustness_cmd(model_dir, ae_dir, config_path, seeds_path, out_dir, schedule, stabilization):
    cfg = RunConfig.load(config_path)
    bundle = load_bundle(model_dir, ae_dir)
    seeds = read_seeds(seeds_path, cfg.eval.base_seed, cfg.eval.robustness_episodes)
    res = evalh.robustness(bundle, seeds, schedule_kind=schedule, stabilization=stabilization,
                           cap=cfg.eval.robustness_cap)
    res["seeds"] = seeds
    evalh.write_results(out_dir, res)
    click.echo(f"robustness mean length {res['mean_length']:.0f} -> {out_dir}")


@main.command()
@click.option("--grid", "grid_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def ablate(grid_path, out_dir):
    """Run the design-choice grid described by a grid JSON file."""
    grid = json.loads(Path(grid_path).read_text())
    bundles = {}
    for name, paths in grid.get("bundles", {}).items():
        try:
            bundles[name] = load_bundle(paths["model"], paths.get("ae"))
        except (FileNotFoundError, ValueError, click.UsageError) as e:
            click.echo(f"variant {name!r} unavailable ({e}); row will be absent")
    table = evalh.run_ablation(
        bundles,
        seeds=grid.get("seeds", list(range(8000, 8150))),
        goal_seeds=grid.get("goal_seeds", list(range(9000, 9050))),
        cap=grid.get("cap", 3000),
        mcg_counts=tuple(grid.get("mcg_counts", (1, 3, 5))),
    )
    evalh.write_results(out_dir, table)
    click.echo((Path(out_dir) / "results.txt").read_text())


@main.command()
@click.option("--model", "model_dir", type=click.Path(exists=True), required=True)
@click.option("--ae", "ae_dir", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--addr", default="127.0.0.1:8700")
def serve(model_dir, ae_dir, config_path, addr):
    """Run the live-steering WebSocket service."""
    import uvicorn

    from .service import build_app

    cfg = RunConfig.load(config_path)
    bundle = load_bundle(model_dir, ae_dir)
    app = build_app(bundle, cfg)
    host, port = addr.rsplit(":", 1)
    uvicorn.run(app, host=host, port=int(port), log_level="warning")


if __name__ == "__main__":
    main()
