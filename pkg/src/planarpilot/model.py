"""Behavior generative model: causal transformer trained with per-frame noise.

Windows of behavior tokens (action representation + canonicalized next
state) are corrupted with an independent noise level per frame and the
model learns to predict the clean window. Conditioning is a single learned
embedding per instruction id (plus a null id for classifier-free guidance),
added to every frame token together with the noise-level embedding.

The model operates in normalized token space; the normalizer and the noise
schedule travel with the checkpoint.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features
from . import tensorlib as tl
from .expert import SKILL_IDS
from .rng import make_rng


@dataclass
class NoiseSchedule:
    """Forward-diffusion table: level 0 is clean, level K is (near) pure noise.

    Betas are linear between endpoints chosen so that abar[K] < 0.01 at
    K = 50 (the classic 1000-step endpoints leave abar[50] ~ 0.6, which
    would not destroy the signal at the top level).
    """

    k_max: int = 50
    beta_min: float = 2e-3
    beta_max: float = 0.36

    def __post_init__(self):
        betas = np.linspace(self.beta_min, self.beta_max, self.k_max, dtype=np.float64)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        self.betas = betas
        self.abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        if np.any(np.diff(self.abar) >= 0):
            raise ValueError("abar must be strictly decreasing")

    def to_dict(self) -> dict:
        return {"k_max": self.k_max, "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def forward_diffuse(x0: np.ndarray, k: np.ndarray, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Per-frame corruption: sqrt(abar_k) x0 + sqrt(1-abar_k) eps."""
    k = np.asarray(k)
    if k.min() < 0 or k.max() > sched.k_max:
        raise ValueError(f"noise level out of range [0, {sched.k_max}]")
    a = sched.abar[k][..., None]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


@dataclass
class ModelConfig:
    layers: int = 2
    width: int = 128
    heads: int = 4
    window: int = 32
    k_max: int = 50
    beta_min: float = 2e-3
    beta_max: float = 0.36
    action_repr: str = "latent"   # or "raw"
    p_uncond: float = 0.1
    lr: float = 3e-4
    warmup_steps: int = 300
    steps: int = 4000
    batch: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


VOCAB = list(SKILL_IDS)
NULL_COND = len(VOCAB)  # index of the unconditioned embedding


def cond_id(name: str | None) -> int:
    if name is None:
        return NULL_COND
    return VOCAB.index(name)


class BehaviorModel:
    def __init__(self, cfg: ModelConfig, token_dim: int, params: dict[str, tl.Tensor],
                 normalizer: features.Normalizer, sched: NoiseSchedule):
        self.cfg = cfg
        self.token_dim = token_dim
        self.params = params
        self.normalizer = normalizer
        self.sched = sched

    # -- construction --

    @classmethod
    def init(cls, cfg: ModelConfig, token_dim: int, normalizer: features.Normalizer) -> "BehaviorModel":
        rng = make_rng(cfg.seed, 20)
        w = cfg.width
        p: dict[str, tl.Tensor] = {}

        def lin(name, din, dout, std_scale=1.0):
            p[f"{name}.w"] = tl.parameter(rng.standard_normal((din, dout)) * std_scale * np.sqrt(2.0 / (din + dout)))
            p[f"{name}.b"] = tl.parameter(np.zeros(dout))

        lin("in_proj", token_dim, w)
        p["k_embed"] = tl.parameter(rng.standard_normal((cfg.k_max + 1, w)) * 0.02)
        p["cond_embed"] = tl.parameter(rng.standard_normal((len(VOCAB) + 1, w)) * 0.02)
        p["pos_embed"] = tl.parameter(rng.standard_normal((cfg.window, w)) * 0.02)
        for i in range(cfg.layers):
            p[f"blk{i}.ln1.g"] = tl.parameter(np.ones(w))
            p[f"blk{i}.ln1.b"] = tl.parameter(np.zeros(w))
            lin(f"blk{i}.qkv", w, 3 * w)
            lin(f"blk{i}.attn_out", w, w)
            p[f"blk{i}.ln2.g"] = tl.parameter(np.ones(w))
            p[f"blk{i}.ln2.b"] = tl.parameter(np.zeros(w))
            lin(f"blk{i}.mlp1", w, 4 * w)
            lin(f"blk{i}.mlp2", 4 * w, w)
        p["ln_f.g"] = tl.parameter(np.ones(w))
        p["ln_f.b"] = tl.parameter(np.zeros(w))
        lin("out_proj", w, token_dim)
        sched = NoiseSchedule(cfg.k_max, cfg.beta_min, cfg.beta_max)
        return cls(cfg, token_dim, p, normalizer, sched)

    # -- forward --

    def forward_graph(self, tokens: tl.Tensor, k: np.ndarray, cond: np.ndarray) -> tl.Tensor:
        """Predict the clean window from (B, Tw, D) normalized noisy tokens.

        Causal: output t depends only on frames <= t (and the condition).
        """
        b, tw, d = tokens.shape
        if d != self.token_dim:
            raise tl.TensorError(f"token dim {d} != model dim {self.token_dim}")
        if tw > self.cfg.window:
            raise tl.TensorError(f"window {tw} exceeds trained length {self.cfg.window}")
        k = np.asarray(k)
        if k.min() < 0 or k.max() > self.cfg.k_max:
            raise tl.TensorError(f"noise level out of range [0, {self.cfg.k_max}]")
        cond = np.asarray(cond)
        if cond.min() < 0 or cond.max() > NULL_COND:
            raise tl.TensorError("condition id out of vocabulary")
        p = self.params
        x = tl.add_bias(tl.matmul(tokens, p["in_proj.w"]), p["in_proj.b"])
        x = tl.add(x, tl.embedding(p["k_embed"], k))
        cond_tok = tl.embedding(p["cond_embed"], cond[:, None].repeat(tw, axis=1))
        x = tl.add(x, cond_tok)
        pos = tl.embedding(p["pos_embed"], np.tile(np.arange(tw), (b, 1)))
        x = tl.add(x, pos)
        for i in range(self.cfg.layers):
            h = tl.layernorm(x, p[f"blk{i}.ln1.g"], p[f"blk{i}.ln1.b"])
            qkv = tl.add_bias(tl.matmul(h, p[f"blk{i}.qkv.w"]), p[f"blk{i}.qkv.b"])
            q, kk, v = tl.split(qkv, [self.cfg.width] * 3, axis=-1)
            att = tl.attention(q, kk, v, n_heads=self.cfg.heads, causal=True)
            att = tl.add_bias(tl.matmul(att, p[f"blk{i}.attn_out.w"]), p[f"blk{i}.attn_out.b"])
            x = tl.add(x, att)
            h = tl.layernorm(x, p[f"blk{i}.ln2.g"], p[f"blk{i}.ln2.b"])
            h = tl.gelu(tl.add_bias(tl.matmul(h, p[f"blk{i}.mlp1.w"]), p[f"blk{i}.mlp1.b"]))
            h = tl.add_bias(tl.matmul(h, p[f"blk{i}.mlp2.w"]), p[f"blk{i}.mlp2.b"])
            x = tl.add(x, h)
        x = tl.layernorm(x, p["ln_f.g"], p["ln_f.b"])
        return tl.add_bias(tl.matmul(x, p["out_proj.w"]), p["out_proj.b"])

    def predict(self, tokens: np.ndarray, k: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Inference forward (no tape)."""
        with tl.no_grad():
            out = self.forward_graph(tl.constant(tokens), k, cond)
        return out.data

    # -- training --

    def sample_levels(self, rng: np.random.Generator, b: int, tw: int) -> np.ndarray:
        """Independent uniform noise level per frame (the training regime)."""
        return rng.integers(0, self.cfg.k_max + 1, size=(b, tw))

    def train_step(self, windows: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                   opt: tl.Adam) -> float:
        cfg = self.cfg
        b, tw, d = windows.shape
        k = self.sample_levels(rng, b, tw)
        noise = rng.standard_normal(windows.shape)
        noisy = forward_diffuse(windows, k, noise, self.sched)
        cond = labels.copy()
        cond[rng.random(b) < cfg.p_uncond] = NULL_COND
        pred = self.forward_graph(tl.constant(noisy.astype(np.float32)), k, cond)
        err = tl.sub(pred, tl.constant(windows.astype(np.float32)))
        loss = tl.tmean(tl.mul(err, err))
        val = float(loss.data)
        if not np.isfinite(val):
            raise RuntimeError("training loss is non-finite")
        if opt is not None:
            opt.zero_grad()
            tl.backward(loss)
            opt.step()
        return val

    def eval_loss(self, windows: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                  n_batches: int = 8) -> float:
        vals = []
        for _ in range(n_batches):
            idx = rng.choice(len(windows), size=min(self.cfg.batch, len(windows)), replace=False)
            k = self.sample_levels(rng, len(idx), windows.shape[1])
            noise = rng.standard_normal(windows[idx].shape)
            noisy = forward_diffuse(windows[idx], k, noise, self.sched)
            pred = self.predict(noisy.astype(np.float32), k, labels[idx])
            vals.append(float(np.mean((pred - windows[idx]) ** 2)))
        return float(np.mean(vals))

    # -- persistence --

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        hyper = {
            "kind": "behavior_model",
            "config": self.cfg.to_dict(),
            "token_dim": self.token_dim,
            "normalizer": self.normalizer.to_dict(),
            "schedule": self.sched.to_dict(),
            "vocab": VOCAB,
        }
        if extra:
            hyper["report"] = extra
        tl.save_checkpoint(path, {k: p.data for k, p in self.params.items()}, hyper)

    @classmethod
    def load(cls, path: str | Path) -> "BehaviorModel":
        tensors, hyper = tl.load_checkpoint(path)
        if hyper.get("kind") != "behavior_model":
            raise ValueError(f"checkpoint at {path} is not a behavior model")
        if hyper.get("vocab") != VOCAB:
            raise ValueError("checkpoint vocabulary does not match this build")
        cfg = ModelConfig.from_dict(hyper["config"])
        model = cls(
            cfg,
            hyper["token_dim"],
            {k: tl.parameter(v) for k, v in tensors.items()},
            features.Normalizer.from_dict(hyper["normalizer"]),
            NoiseSchedule.from_dict(hyper["schedule"]),
        )
        return model

    @property
    def report(self) -> dict:
        return {}


def train_model(windows: np.ndarray, labels: np.ndarray, cfg: ModelConfig) -> tuple[BehaviorModel, dict]:
    """Full training run over packed (N, T, D) windows; deterministic in cfg.seed."""
    t0 = time.time()
    normalizer = features.Normalizer.fit(windows)
    normed = normalizer.apply(windows).astype(np.float32)
    model = BehaviorModel.init(cfg, windows.shape[-1], normalizer)
    opt = tl.Adam(model.params, lr=cfg.lr, warmup_steps=cfg.warmup_steps, decay_steps=cfg.steps)
    rng = make_rng(cfg.seed, 21)
    baseline = model.eval_loss(normed, labels, make_rng(cfg.seed, 22))
    losses = []
    for i in range(cfg.steps):
        idx = rng.choice(len(normed), size=min(cfg.batch, len(normed)), replace=False)
        losses.append(model.train_step(normed[idx], labels[idx], rng, opt))
    final = model.eval_loss(normed, labels, make_rng(cfg.seed, 22))
    report = {
        "steps": cfg.steps,
        "untrained_loss": baseline,
        "final_loss": final,
        "loss_ratio": final / baseline,
        "running_loss_tail": float(np.mean(losses[-50:])),
        "train_seconds": time.time() - t0,
        "n_windows": int(len(windows)),
    }
    return model, report
