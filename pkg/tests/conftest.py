"""Shared fixtures: the full desk bundle, trained once and cached on disk.

The first acceptance run curates the corpus and trains the autoencoder and
both behavior models (latent and raw action spaces); subsequent pytest
invocations reload the cached artifacts, keyed by the configuration hash.
"""

import hashlib
import json
import time
from pathlib import Path

import pytest

from planarpilot import expert, latent
from planarpilot import model as model_mod
from planarpilot.config import RunConfig
from planarpilot.evalh import Bundle

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".cache" / "accept"
CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "desk.json"


def desk_config() -> RunConfig:
    if CONFIG_PATH.exists():
        return RunConfig.load(CONFIG_PATH)
    return RunConfig()


def config_tag(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    return desk_config()


@pytest.fixture(scope="session")
def workdir(run_config) -> Path:
    d = CACHE_ROOT / config_tag(run_config)
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def corpus(run_config, workdir):
    data_dir = workdir / "data"
    if not (data_dir / "episodes.jsonl").exists():
        ds = expert.curate(run_config.curation, seed=0, params=run_config.sim)
        expert.save_dataset(ds, data_dir)
    return expert.load_dataset(data_dir)


@pytest.fixture(scope="session")
def trained_ae(run_config, workdir, corpus):
    ae_dir = workdir / "ae"
    if not (ae_dir / "manifest.json").exists():
        ae, report = latent.train_ae(corpus, run_config.ae, seed=0, sim_params=run_config.sim)
        ae.save(ae_dir)
        (ae_dir / "report.json").write_text(json.dumps(report))
    return latent.ActionAE.load(ae_dir)


@pytest.fixture(scope="session")
def corpus_with_latents(corpus, trained_ae, workdir):
    if corpus.episodes[0].latents is None:
        latent.fill_latents(corpus, trained_ae)
        expert.save_dataset(corpus, workdir / "data")
    return corpus


def _train_variant(run_config, workdir, corpus, action_repr: str):
    out = workdir / f"model_{action_repr}"
    if not (out / "manifest.json").exists():
        toks, labels, _ = expert.window_tokens(corpus, use_latents=action_repr == "latent")
        cfg = model_mod.ModelConfig.from_dict({**run_config.model.to_dict(), "action_repr": action_repr})
        model, report = model_mod.train_model(toks, labels, cfg)
        model.save(out, extra=report)
        (out / "report.json").write_text(json.dumps(report))
    return model_mod.BehaviorModel.load(out)


@pytest.fixture(scope="session")
def latent_bundle(run_config, workdir, corpus_with_latents, trained_ae) -> Bundle:
    model = _train_variant(run_config, workdir, corpus_with_latents, "latent")
    return Bundle(model=model, ae=trained_ae)


@pytest.fixture(scope="session")
def raw_bundle(run_config, workdir, corpus_with_latents) -> Bundle:
    model = _train_variant(run_config, workdir, corpus_with_latents, "raw")
    return Bundle(model=model, ae=None)


def report_of(workdir: Path, name: str) -> dict:
    return json.loads((workdir / name / "report.json").read_text())
