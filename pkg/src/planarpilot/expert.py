"""Scripted expert skills and dataset curation.

Each skill is a closed-loop proportional controller toward a target speed
and turn rate, with sinusoidal PD gait targets whose phase advances with
the character's actual speed. Curation rolls the expert through scheduled
skill sequences, discards any episode that trips the fall predicate, and
writes the corpus to disk (episodes.jsonl + packed stride-8 windows).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features, sim
from .rng import make_rng

SKILL_VOCAB_VERSION = 1

# Closed vocabulary; ids are positions in this list.
SKILL_IDS = [
    "stand",
    "walk-forward",
    "jog-forward",
    "turn-left",
    "turn-right",
    "walk-circle",
    "stop",
]


@dataclass(frozen=True)
class Skill:
    name: str
    target_speed: float   # m/s
    turn_rate: float      # rad/s, CCW positive
    gait_freq: float      # Hz at target speed
    gait_amp: float       # rad


SKILLS: dict[str, Skill] = {
    "stand": Skill("stand", 0.0, 0.0, 1.5, 0.0),
    "walk-forward": Skill("walk-forward", 1.2, 0.0, 1.6, 0.40),
    "jog-forward": Skill("jog-forward", 2.2, 0.0, 2.6, 0.55),
    "turn-left": Skill("turn-left", 0.9, 1.2, 1.6, 0.40),
    "turn-right": Skill("turn-right", 0.9, -1.2, 1.6, 0.40),
    "walk-circle": Skill("walk-circle", 1.0, 0.6, 1.6, 0.40),
    "stop": Skill("stop", 0.0, 0.0, 1.5, 0.0),
}

SPEED_GAIN = 4.0   # N per (m/s) of speed error
TURN_GAIN = 2.0    # N m per (rad/s) of turn-rate error


def skill_id(name: str) -> int:
    try:
        return SKILL_IDS.index(name)
    except ValueError:
        raise KeyError(f"unknown skill {name!r}; vocabulary: {SKILL_IDS}") from None


def expert_action(skill: Skill, s: sim.SimState, phase: float, params: sim.SimParams) -> sim.Action:
    """Proportional speed/turn control with drag feedforward, plus gait PD targets."""
    if skill.name not in SKILLS:
        raise KeyError(f"unknown skill {skill.name!r}")
    v_along = float(s.vel @ s.heading)
    f = (params.lin_drag * skill.target_speed + SPEED_GAIN * (skill.target_speed - v_along)) / params.f_max
    tau = (params.ang_drag * skill.turn_rate + TURN_GAIN * (skill.turn_rate - float(s.omega))) / params.t_max
    q_target = skill.gait_amp * np.array([math.sin(phase), math.sin(phase + math.pi)])
    return sim.clamp_action(
        sim.Action(drive=np.float64(f), steer=np.float64(tau), q_target=q_target), params
    )


def advance_phase(skill: Skill, s: sim.SimState, phase: float, params: sim.SimParams) -> float:
    """Gait phase rate scales with actual speed relative to the skill target."""
    ref = max(skill.target_speed, 0.5)
    rate = min(float(np.linalg.norm(s.vel)) / ref, 1.5)
    return phase + 2.0 * math.pi * skill.gait_freq * params.dt * rate


@dataclass
class ScheduleSpec:
    """How skill segments are drawn within an episode."""

    skills: list[str] = field(default_factory=lambda: list(SKILL_IDS))
    weights: list[float] | None = None
    min_hold: int = 45    # frames
    max_hold: int = 120


@dataclass
class CurationConfig:
    n_episodes: int = 500
    min_length: int = 240
    max_length: int = 360
    window: int = 32
    stride: int = 8
    relabel_window: int = 8
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    randomize_init: bool = True
    # Exploration noise on the stored actions. Without it the expert action
    # is (nearly) a function of the current state alone, the latent z has
    # nothing to encode, and downstream latent-space control degenerates.
    # The noise also widens state coverage so the data demonstrates the
    # controller's restoring corrections off the nominal gait manifold.
    noise_drive: float = 0.10
    noise_steer: float = 0.10
    noise_joint: float = 0.06
    # Slowly varying turn-rate and speed wander on locomotion skills (OU
    # processes). Straight-line, fixed-speed skills would leave the
    # conditioned distribution without the turning and slow-approach modes
    # that guidance needs to select; real gait data always wanders.
    turn_wander_std: float = 0.4
    turn_wander_tau: float = 1.5
    speed_wander_std: float = 0.35
    speed_wander_tau: float = 2.5
    min_locomotion_speed: float = 0.35

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "schedule"}
        d["schedule"] = {
            "skills": self.schedule.skills,
            "weights": self.schedule.weights,
            "min_hold": self.schedule.min_hold,
            "max_hold": self.schedule.max_hold,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CurationConfig":
        d = dict(d)
        sched = d.pop("schedule", {})
        return cls(schedule=ScheduleSpec(**sched), **d)


@dataclass
class Episode:
    seed: int
    states: np.ndarray        # (L+1, 11) packed float64
    actions: np.ndarray       # (L, 4)
    labels: np.ndarray        # (L,) int skill ids
    schedule: list[tuple[int, str]]
    latents: np.ndarray | None = None  # (L, d_z), filled in pass 2

    @property
    def length(self) -> int:
        return self.actions.shape[0]


@dataclass
class Dataset:
    episodes: list[Episode]
    config: CurationConfig
    discarded: int = 0

    def window_index(self) -> list[tuple[int, int]]:
        """(episode, start) pairs for stride-S windows of length T."""
        t, s = self.config.window, self.config.stride
        out = []
        for i, ep in enumerate(self.episodes):
            if ep.length < t:
                continue
            for start in range(0, ep.length - t + 1, s):
                out.append((i, start))
        return out

    def window_label(self, ep_idx: int, start: int) -> int:
        """Majority label over the window; ties go to the later label."""
        labels = self.episodes[ep_idx].labels[start : start + self.config.window]
        counts: dict[int, int] = {}
        last_pos: dict[int, int] = {}
        for pos, lab in enumerate(labels):
            lab = int(lab)
            counts[lab] = counts.get(lab, 0) + 1
            last_pos[lab] = pos
        best = max(counts.items(), key=lambda kv: (kv[1], last_pos[kv[0]]))
        return best[0]

    def n_frames(self) -> int:
        return sum(ep.length for ep in self.episodes)


def sample_schedule(spec: ScheduleSpec, length: int, rng: np.random.Generator) -> list[tuple[int, str]]:
    weights = spec.weights or [1.0] * len(spec.skills)
    p = np.array(weights, dtype=np.float64)
    p /= p.sum()
    sched: list[tuple[int, str]] = []
    t = 0
    prev = None
    while t < length:
        name = str(rng.choice(spec.skills, p=p))
        if name == prev:  # force actual switches
            name = spec.skills[(spec.skills.index(name) + 1) % len(spec.skills)]
        sched.append((t, name))
        prev = name
        t += int(rng.integers(spec.min_hold, spec.max_hold + 1))
    return sched


def label_at(schedule: list[tuple[int, str]], t: int) -> str:
    name = schedule[0][1]
    for start, sk in schedule:
        if t >= start:
            name = sk
        else:
            break
    return name


def roll_episode(
    seed: int,
    length: int,
    schedule: list[tuple[int, str]],
    params: sim.SimParams,
    randomize: bool,
    action_noise: tuple[float, float, float] | None = None,
    turn_wander: tuple[float, float] | None = None,
    speed_wander: tuple[float, float, float] | None = None,
) -> Episode | None:
    """Run the expert; None if the fall predicate ever trips."""
    s = sim.reset(seed=seed, spec=sim.InitSpec(randomize=randomize))
    phase = float(make_rng(seed, 1).uniform(0, 2 * math.pi))
    noise_rng = make_rng(seed, 3) if action_noise else None
    wander_rng = make_rng(seed, 4) if (turn_wander or speed_wander) else None
    wander = 0.0
    speed_off = 0.0
    if turn_wander:
        w_std, w_tau = turn_wander
        decay = math.exp(-params.dt / w_tau)
        diffuse = w_std * math.sqrt(1.0 - decay * decay)
    if speed_wander:
        v_std, v_tau, v_floor = speed_wander
        v_decay = math.exp(-params.dt / v_tau)
        v_diffuse = v_std * math.sqrt(1.0 - v_decay * v_decay)
    states = [s.flat()]
    acts = []
    labels = []
    for t in range(length):
        name = label_at(schedule, t)
        skill = SKILLS[name]
        if wander_rng is not None:
            changes = {}
            if turn_wander:
                wander = wander * decay + diffuse * wander_rng.standard_normal()
                if skill.target_speed > 0:
                    changes["turn_rate"] = skill.turn_rate + wander
            if speed_wander:
                speed_off = speed_off * v_decay + v_diffuse * wander_rng.standard_normal()
                if skill.target_speed > 0:
                    changes["target_speed"] = max(skill.target_speed + speed_off, v_floor)
            if changes:
                skill = replace(skill, **changes)
        a = expert_action(skill, s, phase, params)
        if noise_rng is not None:
            nd, ns, nj = action_noise
            a = sim.clamp_action(
                sim.Action(
                    drive=a.drive + nd * noise_rng.standard_normal(),
                    steer=a.steer + ns * noise_rng.standard_normal(),
                    q_target=a.q_target + nj * noise_rng.standard_normal(2),
                ),
                params,
            )
        phase = advance_phase(skill, s, phase, params)
        s = sim.step(s, a, params)
        if bool(is_fallen_scalar(s, params)):
            return None
        states.append(s.flat())
        acts.append(a.flat())
        labels.append(skill_id(name))
    return Episode(
        seed=seed,
        states=np.stack(states),
        actions=np.stack(acts),
        labels=np.array(labels, dtype=np.int64),
        schedule=schedule,
    )


def is_fallen_scalar(s: sim.SimState, params: sim.SimParams) -> bool:
    return bool(np.asarray(sim.is_fallen(s, params)))


def relabel_transitions(ds: Dataset) -> Dataset:
    """Shift each label switch back by the transition window, later switch wins."""
    w = ds.config.relabel_window
    if w <= 0:
        return ds
    for ep in ds.episodes:
        labels = ep.labels.copy()
        switches = [t for t in range(1, ep.length) if ep.labels[t] != ep.labels[t - 1]]
        for t in switches:
            lo = max(0, t - w)
            labels[lo:t] = ep.labels[t]
        ep.labels = labels
    return ds


def curate(config: CurationConfig, seed: int, params: sim.SimParams | None = None) -> Dataset:
    """Roll the expert into a corpus; deterministic from ``seed``."""
    params = params or sim.SimParams()
    episodes: list[Episode] = []
    discarded = 0
    i = 0
    while len(episodes) < config.n_episodes:
        ep_seed = seed * 1_000_003 + i
        rng = make_rng(seed, 2, i)
        length = int(rng.integers(config.min_length, config.max_length + 1))
        schedule = sample_schedule(config.schedule, length, rng)
        noise = (config.noise_drive, config.noise_steer, config.noise_joint)
        wander = (config.turn_wander_std, config.turn_wander_tau) if config.turn_wander_std > 0 else None
        speed_w = (
            (config.speed_wander_std, config.speed_wander_tau, config.min_locomotion_speed)
            if config.speed_wander_std > 0
            else None
        )
        ep = roll_episode(
            ep_seed, length, schedule, params, config.randomize_init,
            action_noise=noise, turn_wander=wander, speed_wander=speed_w,
        )
        i += 1
        if ep is None:
            discarded += 1
            if discarded > 10 * config.n_episodes:
                raise RuntimeError(
                    f"curation discarded {discarded} episodes without filling the corpus; "
                    "check simulator parameters and expert gains"
                )
            continue
        episodes.append(ep)
    ds = Dataset(episodes=episodes, config=config, discarded=discarded)
    return relabel_transitions(ds)


# ---------------------------------------------------------------------------
# disk format


WINDOWS_MAGIC = b"UPHY"
WINDOWS_VERSION = 1


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.jsonl", "w") as f:
        header = {
            "kind": "header",
            "config": ds.config.to_dict(),
            "discarded": ds.discarded,
            "skill_vocab": SKILL_IDS,
            "skill_vocab_version": SKILL_VOCAB_VERSION,
        }
        f.write(json.dumps(header) + "\n")
        for i, ep in enumerate(ds.episodes):
            rec = {
                "episode": i,
                "seed": ep.seed,
                "length": ep.length,
                "schedule": [[t, n] for t, n in ep.schedule],
                "states": ep.states.tolist(),
                "actions": ep.actions.tolist(),
                "labels": ep.labels.tolist(),
            }
            f.write(json.dumps(rec) + "\n")
    if any(ep.latents is not None for ep in ds.episodes):
        np.save(out / "latents.npy", np.concatenate([ep.latents for ep in ds.episodes]))
    write_windows(ds, out)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    episodes = []
    with open(path / "episodes.jsonl") as f:
        header = json.loads(f.readline())
        config = CurationConfig.from_dict(header["config"])
        if header.get("skill_vocab") != SKILL_IDS:
            raise ValueError("dataset skill vocabulary does not match this build")
        for line in f:
            rec = json.loads(line)
            episodes.append(
                Episode(
                    seed=rec["seed"],
                    states=np.array(rec["states"], dtype=np.float64),
                    actions=np.array(rec["actions"], dtype=np.float64),
                    labels=np.array(rec["labels"], dtype=np.int64),
                    schedule=[(t, n) for t, n in rec["schedule"]],
                )
            )
    ds = Dataset(episodes=episodes, config=config, discarded=header.get("discarded", 0))
    lat_file = path / "latents.npy"
    if lat_file.exists():
        flat = np.load(lat_file)
        off = 0
        for ep in ds.episodes:
            ep.latents = flat[off : off + ep.length].copy()
            off += ep.length
        if off != flat.shape[0]:
            raise ValueError("latents.npy does not cover the dataset")
    return ds


def window_tokens(ds: Dataset, use_latents: bool) -> tuple[np.ndarray, np.ndarray, list]:
    """Pack all indexed windows: tokens (N, T, D), labels (N,), anchors."""
    index = ds.window_index()
    toks, labels, anchors = [], [], []
    for ep_idx, start in index:
        ep = ds.episodes[ep_idx]
        t = ds.config.window
        if use_latents:
            if ep.latents is None:
                raise ValueError("dataset has no latents; run the encoder pass first")
            acts = ep.latents[start : start + t]
        else:
            acts = ep.actions[start : start + t]
        tok, anchor = features.canonicalize(ep.states[start : start + t + 1], acts)
        toks.append(tok.astype(np.float32))
        labels.append(ds.window_label(ep_idx, start))
        anchors.append(anchor)
    return np.stack(toks), np.array(labels, dtype=np.int64), anchors


def write_windows(ds: Dataset, out_dir: str | Path) -> None:
    """windows.bin: UPHY header + packed f32 windows; windows.json: the index.

    Uses latent tokens when the dataset carries latents, raw actions otherwise.
    """
    out = Path(out_dir)
    use_latents = all(ep.latents is not None for ep in ds.episodes) and len(ds.episodes) > 0
    toks, labels, _ = window_tokens(ds, use_latents=use_latents)
    n, t, d = toks.shape
    with open(out / "windows.bin", "wb") as f:
        f.write(WINDOWS_MAGIC)
        f.write(struct.pack("<III", WINDOWS_VERSION, t, d))
        f.write(struct.pack("<Q", n))
        f.write(toks.astype("<f4").tobytes())
    index = ds.window_index()
    (out / "windows.json").write_text(
        json.dumps(
            {
                "count": n,
                "T": t,
                "dim": d,
                "stride": ds.config.stride,
                "action_repr": "latent" if use_latents else "raw",
                "windows": [
                    {"episode": e, "start": s, "label": int(l)}
                    for (e, s), l in zip(index, labels)
                ],
            }
        )
    )


def read_windows(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = (path / "windows.bin").read_bytes()
    if raw[:4] != WINDOWS_MAGIC:
        raise ValueError("bad windows.bin magic")
    version, t, d = struct.unpack("<III", raw[4:16])
    if version != WINDOWS_VERSION:
        raise ValueError(f"unsupported windows.bin version {version}")
    (n,) = struct.unpack("<Q", raw[16:24])
    toks = np.frombuffer(raw[24:], dtype="<f4").reshape(n, t, d).copy()
    meta = json.loads((path / "windows.json").read_text())
    return toks, meta
