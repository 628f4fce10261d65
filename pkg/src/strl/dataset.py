"""Trajectories, returns-to-go, state normalization, batching and splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DUMMY_ACTION = 4
N_ACTIONS = 4
MAX_STEPS = 100


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    states: list[tuple[float, float]]
    actions: list[int]
    rewards: list[float]
    returns_to_go: list[float]
    seed: int = 0
    width: int = 0
    height: int = 0

    def __post_init__(self):
        n = len(self.states)
        if not (n == len(self.actions) == len(self.rewards) == len(self.returns_to_go)):
            raise DatasetError("trajectory fields have mismatched lengths")

    def __len__(self) -> int:
        return len(self.actions)

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "W": self.width,
            "H": self.height,
            "states": [list(s) for s in self.states],
            "actions": list(self.actions),
            "rewards": list(self.rewards),
            "returns_to_go": list(self.returns_to_go),
        }


def returns_to_go(rewards: Sequence[float]) -> list[float]:
    if len(rewards) == 0:
        raise DatasetError("returns_to_go needs at least one reward")
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc += rewards[i]
        out[i] = acc
    return out


def make_trajectory(states, actions, rewards, **meta) -> Trajectory:
    return Trajectory(
        states=[(float(x), float(y)) for x, y in states],
        actions=[int(a) for a in actions],
        rewards=[float(r) for r in rewards],
        returns_to_go=returns_to_go(rewards),
        **meta,
    )


# ---------------------------------------------------------------- normalizer


@dataclass(frozen=True)
class NormStats:
    mu: tuple[float, ...]
    sigma: tuple[float, ...]
    epsilon: float = 1e-8

    def to_dict(self) -> dict:
        return {"mu": list(self.mu), "sigma": list(self.sigma), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["mu"]), tuple(d["sigma"]), d.get("epsilon", 1e-8))


def fit_normalizer(train_states, epsilon: float = 1e-8) -> NormStats:
    arr = np.asarray(train_states, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise DatasetError("fit_normalizer needs at least 2 states")
    mu = arr.mean(axis=0)
    sigma = arr.std(axis=0) + epsilon  # population std, denominator N
    return NormStats(tuple(float(v) for v in mu), tuple(float(v) for v in sigma), epsilon)


def apply_normalizer(stats: NormStats, state):
    s = np.asarray(state, dtype=np.float64)
    out = (s - np.asarray(stats.mu)) / np.asarray(stats.sigma)
    if s.ndim == 1:
        return tuple(float(v) for v in out)
    return out


def invert_normalizer(stats: NormStats, state):
    s = np.asarray(state, dtype=np.float64)
    out = s * np.asarray(stats.sigma) + np.asarray(stats.mu)
    if s.ndim == 1:
        return tuple(float(v) for v in out)
    return out


# ---------------------------------------------------------------- velocities


def discretize_velocity(vx: float, vy: float, warnings: dict | None = None) -> int:
    """Map a 2-D velocity to a cardinal action by axis dominance, then sign.

    Ties in magnitude go to the x axis; a zero vector maps to "right" and is
    counted under ``warnings["zero_velocity"]`` when a dict is passed.
    """
    if vx == 0 and vy == 0:
        if warnings is not None:
            warnings["zero_velocity"] = warnings.get("zero_velocity", 0) + 1
        return 1
    if abs(vx) >= abs(vy):
        return 1 if vx > 0 else 0
    return 3 if vy > 0 else 2


# ---------------------------------------------------------------- batching


@dataclass
class TokenBatch:
    states: np.ndarray  # [B, S, 2] normalized
    prev_actions: np.ndarray  # [B, S] int, DUMMY_ACTION at t=0
    rtg: np.ndarray  # [B, S]
    timesteps: np.ndarray  # [B, S]
    target_actions: np.ndarray  # [B, S]
    mask: np.ndarray  # [B, S] bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def n_valid(self) -> int:
        return int(self.mask.sum())


def encode(trajs: Sequence[Trajectory], S: int, stats: NormStats | None) -> TokenBatch:
    """Pad/truncate trajectories to length ``S`` and stack them into a batch."""
    if not 1 <= S <= MAX_STEPS:
        raise DatasetError(f"sequence length {S} outside [1, {MAX_STEPS}]")
    B = len(trajs)
    states = np.zeros((B, S, 2))
    prev = np.full((B, S), DUMMY_ACTION, dtype=np.int64)
    rtg = np.zeros((B, S))
    tgt = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    for b, tr in enumerate(trajs):
        n = min(len(tr), S)
        if n == 0:
            continue
        raw = np.asarray(tr.states[:n], dtype=np.float64)
        states[b, :n] = apply_normalizer(stats, raw) if stats is not None else raw
        acts = np.asarray(tr.actions[:n], dtype=np.int64)
        prev[b, 1:n] = acts[: n - 1]
        rtg[b, :n] = tr.returns_to_go[:n]
        tgt[b, :n] = acts
        mask[b, :n] = True
    timesteps = np.broadcast_to(np.arange(S), (B, S)).copy()
    return TokenBatch(states, prev, rtg, timesteps, tgt, mask)


def batchify(
    trajs: Sequence[Trajectory],
    S: int,
    B: int,
    rng: np.random.Generator | None,
    stats: NormStats | None = None,
) -> Iterator[TokenBatch]:
    """Yield shuffled mini-batches; ``rng=None`` keeps the input order."""
    if len(trajs) == 0:
        raise DatasetError("cannot batch an empty trajectory list")
    if B < 1:
        raise DatasetError("batch size must be positive")
    order = np.arange(len(trajs)) if rng is None else rng.permutation(len(trajs))
    for i in range(0, len(order), B):
        yield encode([trajs[j] for j in order[i : i + B]], S, stats)


def validate_batch(batch: TokenBatch, S_max: int = MAX_STEPS) -> None:
    B, S = batch.mask.shape
    if S > S_max:
        raise DatasetError(f"sequence length {S} exceeds {S_max}")
    if batch.states.shape != (B, S, 2):
        raise DatasetError(f"states shape {batch.states.shape} != {(B, S, 2)}")
    for name in ("prev_actions", "rtg", "timesteps", "target_actions"):
        if getattr(batch, name).shape != (B, S):
            raise DatasetError(f"{name} has shape {getattr(batch, name).shape}")
    if np.any(batch.prev_actions[:, 0] != DUMMY_ACTION):
        raise DatasetError("first previous action must be the dummy token")
    if np.any((batch.prev_actions < 0) | (batch.prev_actions > DUMMY_ACTION)):
        raise DatasetError("previous action out of range")
    valid_t = batch.target_actions[batch.mask]
    if np.any((valid_t < 0) | (valid_t >= N_ACTIONS)):
        raise DatasetError("target action out of range")
    if np.any((batch.timesteps < 0) | (batch.timesteps >= S)):
        raise DatasetError("timestep out of range")
    if not np.all(np.isfinite(batch.states)) or not np.all(np.isfinite(batch.rtg)):
        raise DatasetError("non-finite batch values")


# ---------------------------------------------------------------- splits


def split_dataset(
    trajs: Sequence[Trajectory],
    fractions: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[list[Trajectory], list[Trajectory], list[Trajectory]]:
    """Partition by maze seed so no layout appears in two splits."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    keys = sorted({t.seed for t in trajs})
    perm = np.random.default_rng(seed).permutation(len(keys))
    n = len(keys)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    bucket = {}
    for rank, idx in enumerate(perm):
        bucket[keys[idx]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    out: tuple[list, list, list] = ([], [], [])
    for t in trajs:
        out[bucket[t.seed]].append(t)
    return out


# ---------------------------------------------------------------- corpus files


def write_corpus(path: str | Path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(json.dumps(t.to_record()) + "\n")


def _parse_record(rec: dict, lineno: int, warnings: dict) -> Trajectory:
    if not isinstance(rec, dict):
        raise DatasetError(f"line {lineno}: record is not an object")
    try:
        states = [(float(s[0]), float(s[1])) for s in rec["states"]]
        rewards = [float(r) for r in rec["rewards"]]
        if "actions" in rec:
            actions = [int(a) for a in rec["actions"]]
        elif "velocities" in rec:
            actions = [discretize_velocity(float(v[0]), float(v[1]), warnings) for v in rec["velocities"]]
        else:
            raise DatasetError(f"line {lineno}: record needs 'actions' or 'velocities'")
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"line {lineno}: malformed record ({exc!r})") from None
    if not states:
        raise DatasetError(f"line {lineno}: empty trajectory")
    if not (len(states) == len(actions) == len(rewards)):
        raise DatasetError(f"line {lineno}: states/actions/rewards lengths differ")
    if any(a < 0 or a >= N_ACTIONS for a in actions):
        raise DatasetError(f"line {lineno}: action out of range")
    if not all(math.isfinite(v) for s in states for v in s) or not all(math.isfinite(r) for r in rewards):
        raise DatasetError(f"line {lineno}: non-finite value")
    traj = make_trajectory(
        states,
        actions,
        rewards,
        seed=int(rec.get("seed", lineno)),
        width=int(rec.get("W", 0)),
        height=int(rec.get("H", 0)),
    )
    if "returns_to_go" in rec:
        stored = [float(g) for g in rec["returns_to_go"]]
        if len(stored) != len(rewards) or any(abs(a - b) > 1e-9 for a, b in zip(stored, traj.returns_to_go)):
            raise DatasetError(f"line {lineno}: stored returns_to_go disagree with rewards")
    return traj


def read_corpus(path: str | Path, warnings: dict | None = None) -> list[Trajectory]:
    """Read a line-delimited trajectory file (corpus or interchange format)."""
    warnings = {} if warnings is None else warnings
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            out.append(_parse_record(rec, lineno, warnings))
    if not out:
        raise DatasetError(f"{path}: no trajectories")
    return out
