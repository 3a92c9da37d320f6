"""Episode logs: the rollout record consumed by the evaluator and the UI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class EpisodeLog:
    """Timestamped rollout record.

    Frame arrays are row-aligned: row t holds the state *before* step t and
    the action applied at step t. ``final_state`` closes the trajectory, so
    the visited positions are states[:, 0:2] plus the final state's.
    """

    seed: int
    config_snapshot: dict
    states: np.ndarray                 # (L, 11)
    actions: np.ndarray                # (L, 4)
    latents: np.ndarray | None         # (L, d_z) when the latent decoder ran
    instructions: list[str | None]     # per frame
    metrics: dict[str, np.ndarray] = field(default_factory=dict)  # per-frame scalars
    events: list[tuple[int, str]] = field(default_factory=list)   # (step, kind)
    final_state: np.ndarray | None = None
    outcome: str = "budget"            # budget | fall | success | collision

    @property
    def length(self) -> int:
        return int(self.states.shape[0])

    def positions(self) -> np.ndarray:
        """All visited root positions including the terminal state."""
        rows = [self.states[:, 0:2]]
        if self.final_state is not None:
            rows.append(self.final_state[None, 0:2])
        return np.concatenate(rows, axis=0)

    def event_steps(self, kind: str) -> list[int]:
        return [s for s, k in self.events if k == kind]

    # -- JSON lines: header, one frame record per line, footer --

    def dump_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"kind": "header", "seed": self.seed, "config": self.config_snapshot}) + "\n")
            for t in range(self.length):
                rec = {
                    "step": t,
                    "state": self.states[t].tolist(),
                    "action": self.actions[t].tolist(),
                    "z": self.latents[t].tolist() if self.latents is not None else None,
                    "instruction": self.instructions[t],
                    "metrics": {k: float(v[t]) for k, v in self.metrics.items()},
                    "events": [k for s, k in self.events if s == t],
                }
                f.write(json.dumps(rec) + "\n")
            footer = {
                "kind": "end",
                "outcome": self.outcome,
                "length": self.length,
                "final_state": self.final_state.tolist() if self.final_state is not None else None,
            }
            f.write(json.dumps(footer) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "EpisodeLog":
        states, actions, latents, instructions = [], [], [], []
        metrics: dict[str, list] = {}
        events: list[tuple[int, str]] = []
        header, footer = None, None
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                if rec.get("kind") == "header":
                    header = rec
                elif rec.get("kind") == "end":
                    footer = rec
                else:
                    states.append(rec["state"])
                    actions.append(rec["action"])
                    latents.append(rec["z"])
                    instructions.append(rec["instruction"])
                    for k, v in rec["metrics"].items():
                        metrics.setdefault(k, []).append(v)
                    for k in rec["events"]:
                        events.append((rec["step"], k))
        if header is None or footer is None:
            raise ValueError(f"log {path} is missing header or footer")
        has_z = latents and latents[0] is not None
        return cls(
            seed=header["seed"],
            config_snapshot=header["config"],
            states=np.array(states, dtype=np.float64),
            actions=np.array(actions, dtype=np.float64),
            latents=np.array(latents, dtype=np.float64) if has_z else None,
            instructions=instructions,
            metrics={k: np.array(v) for k, v in metrics.items()},
            events=events,
            final_state=np.array(footer["final_state"]) if footer["final_state"] is not None else None,
            outcome=footer["outcome"],
        )
