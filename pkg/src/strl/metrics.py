"""Test-set evaluation: per-step accuracy, confusion matrix, rollouts, comparisons."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dataset import DUMMY_ACTION, N_ACTIONS, NormStats, TokenBatch, Trajectory, apply_normalizer, batchify
from .maze import MazeGrid, astar_solve, env_step, move_action, reset
from .policy import Checkpoint, Policy
from .snn import SpikeTrace


class EvaluationError(ValueError):
    pass


@dataclass
class StepEval:
    loss: float
    accuracy: float
    confusion: np.ndarray  # [4, 4], rows = true action, cols = predicted
    predictions: np.ndarray  # flat predicted actions over unmasked positions
    targets: np.ndarray

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "confusion": self.confusion.tolist(),
                "n_positions": int(self.confusion.sum())}


def confusion_matrix(targets: np.ndarray, preds: np.ndarray, n: int = N_ACTIONS) -> np.ndarray:
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (np.asarray(targets), np.asarray(preds)), 1)
    return cm


def check_stats(ckpt: Checkpoint, stats: NormStats, rtol: float = 1e-12) -> None:
    a = np.array(ckpt.stats.mu + ckpt.stats.sigma)
    b = np.array(stats.mu + stats.sigma)
    if a.shape != b.shape or not np.allclose(a, b, rtol=rtol, atol=0):
        raise EvaluationError("checkpoint normalizer statistics do not match the dataset's training split")


def logits_fn(policy: Policy) -> Callable[[TokenBatch], np.ndarray]:
    def run(batch: TokenBatch) -> np.ndarray:
        with nx.no_grad():
            return policy(batch).data

    return run


def evaluate_per_step(policy: Policy | Callable, trajs: Sequence[Trajectory], stats: NormStats, S: int,
                      batch_size: int = 64) -> StepEval:
    """Teacher-forced loss, accuracy = trace(CM)/sum(CM), and confusion matrix."""
    run = logits_fn(policy) if isinstance(policy, Policy) else policy
    total = 0.0
    preds, tgts = [], []
    for batch in batchify(trajs, S, batch_size, None, stats):
        logits = run(batch)
        k = batch.n_valid()
        total += nx.cross_entropy_masked(nx.Tensor(logits, dtype=np.float64), batch.target_actions, batch.mask).item() * k
        preds.append(logits.argmax(axis=-1)[batch.mask])
        tgts.append(batch.target_actions[batch.mask])
    p = np.concatenate(preds)
    t = np.concatenate(tgts)
    cm = confusion_matrix(t, p)
    return StepEval(total / len(t), float(np.trace(cm) / cm.sum()), cm, p, t)


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutResult:
    seed: int
    reached_goal: bool
    exact_match: bool
    steps: int
    optimal_moves: int
    path: list[tuple[int, int]]


@dataclass
class FidelityReport:
    goal_rate: float
    exact_match_rate: float
    mean_excess_steps: float | None
    n_mazes: int

    def to_dict(self) -> dict:
        return asdict(self)


def expert_return(optimal_moves: int) -> float:
    return 1.0 - 0.1 * optimal_moves


def rollout_batch(act: Callable[[TokenBatch], np.ndarray], grids: Sequence[MazeGrid], stats: NormStats,
                  target_returns: Sequence[float] | None = None, max_steps: int = 100,
                  context: int | None = None) -> list[RolloutResult]:
    """Closed-loop greedy rollouts of several mazes in lockstep.

    At each step the model sees the visited states, the actions taken so far and
    returns-to-go starting at the target return and decremented by observed rewards.
    Row b of every batch passed to ``act`` belongs to ``grids[b]``. With ``context``
    set, only the most recent ``context`` steps are shown, re-indexed from 0.
    """
    B = len(grids)
    optimal = [astar_solve(g) for g in grids]
    if target_returns is None:
        target_returns = [expert_return(len(p) - 1) for p in optimal]
    envs = [reset(g) for g in grids]
    paths = [[g.start] for g in grids]
    actions: list[list[int]] = [[] for _ in grids]
    rtg = [[float(r)] for r in target_returns]
    for k in range(max_steps):
        active = [b for b in range(B) if not envs[b].done]
        if not active:
            break
        S = k + 1
        states = np.array([paths[b] for b in range(B)], dtype=np.float64)  # [B, S, 2]
        prev = np.full((B, S), DUMMY_ACTION, dtype=np.int64)
        if k:
            prev[:, 1:] = np.array([actions[b] for b in range(B)])
        rtgs = np.array(rtg)
        if context is not None and S > context:
            states, prev, rtgs = states[:, -context:], prev[:, -context:], rtgs[:, -context:]
            S = context
        batch = TokenBatch(
            states=apply_normalizer(stats, states.reshape(-1, 2)).reshape(B, S, 2),
            prev_actions=prev,
            rtg=rtgs,
            timesteps=np.broadcast_to(np.arange(S), (B, S)).copy(),
            target_actions=np.zeros((B, S), dtype=np.int64),
            mask=np.ones((B, S), dtype=bool),
        )
        chosen = act(batch)[:, -1].argmax(axis=-1)
        for b in range(B):
            if envs[b].done:
                # finished rows keep a frozen, well-formed history
                a, pos, r = 0, paths[b][-1], 0.0
            else:
                a = int(chosen[b])
                envs[b], r = env_step(grids[b], envs[b], a)
                pos = envs[b].position
            actions[b].append(a)
            paths[b].append(pos)
            rtg[b].append(rtg[b][-1] - r)
    out = []
    for b, g in enumerate(grids):
        steps = envs[b].step_count
        path = paths[b][: steps + 1]
        reached = path[-1] == g.goal
        out.append(RolloutResult(g.seed, reached, reached and path == optimal[b], steps, len(optimal[b]) - 1, path))
    return out


def _context(policy) -> int | None:
    return policy.cfg.S_max if isinstance(policy, Policy) else None


def greedy_rollout(policy: Policy | Callable, grid: MazeGrid, stats: NormStats,
                   target_return: float | None = None) -> RolloutResult:
    act = logits_fn(policy) if isinstance(policy, Policy) else policy
    tr = None if target_return is None else [target_return]
    return rollout_batch(act, [grid], stats, tr, context=_context(policy))[0]


def fidelity(results: Sequence[RolloutResult]) -> FidelityReport:
    n = len(results)
    if n == 0:
        return FidelityReport(0.0, 0.0, None, 0)
    wins = [r for r in results if r.reached_goal]
    excess = float(np.mean([r.steps - r.optimal_moves for r in wins])) if wins else None
    return FidelityReport(len(wins) / n, sum(r.exact_match for r in results) / n, excess, n)


def evaluate_rollouts(policy: Policy | Callable, grids: Sequence[MazeGrid], stats: NormStats,
                      chunk: int = 128) -> tuple[FidelityReport, list[RolloutResult]]:
    act = logits_fn(policy) if isinstance(policy, Policy) else policy
    results: list[RolloutResult] = []
    for i in range(0, len(grids), chunk):
        # grid-aware stand-ins (the expert oracle) need to know which rows they serve
        step = act.subset(i, i + chunk) if hasattr(act, "subset") else act
        results.extend(rollout_batch(step, grids[i : i + chunk], stats, context=_context(policy)))
    return fidelity(results), results


class ExpertOracle:
    """Stand-in policy that emits the A* action for the current position of each row."""

    def __init__(self, grids: Sequence[MazeGrid], stats: NormStats):
        self.stats = stats
        self.next_action = []
        for g in grids:
            path = astar_solve(g)
            self.next_action.append({a: move_action(a, b) for a, b in zip(path, path[1:])})

    def subset(self, start: int, stop: int) -> "ExpertOracle":
        out = ExpertOracle([], self.stats)
        out.next_action = self.next_action[start:stop]
        return out

    def __call__(self, batch: TokenBatch) -> np.ndarray:
        B, S = batch.mask.shape
        raw = batch.states * np.asarray(self.stats.sigma) + np.asarray(self.stats.mu)
        logits = np.zeros((B, S, N_ACTIONS))
        for b in range(B):
            for t in range(S):
                pos = (int(round(raw[b, t, 0])), int(round(raw[b, t, 1])))
                logits[b, t, self.next_action[b].get(pos, 0)] = 1.0
        return logits


# ---------------------------------------------------------------- spikes / energy


def spike_report(policy: Policy, trajs: Sequence[Trajectory], stats: NormStats, S: int,
                 e_mac: float = 4.6, e_ac: float = 0.9, batch_size: int = 64) -> dict:
    """Firing rates and MAC/AC operation counts accumulated over ``trajs``."""
    trace = SpikeTrace()
    tokens = 0
    with nx.no_grad():
        for batch in batchify(trajs, S, batch_size, None, stats):
            policy(batch, trace)
            tokens += batch.n_valid()
    out = trace.summary(e_mac, e_ac)
    out["kind"] = policy.kind
    out["tokens"] = tokens
    out["energy_per_token"] = out["energy_proxy"] / tokens
    out["mac_per_token"] = out["n_mac"] / tokens
    out["ac_per_token"] = out["n_ac"] / tokens
    if policy.kind != "snn":
        out["firing_rates"] = {}
        out["mean_firing_rate"] = None
    return out


# ---------------------------------------------------------------- comparison

COMPARE_FIELDS = ("test_loss", "test_acc", "goal_rate", "exact_match_rate", "mean_excess_steps",
                  "n_mac", "n_ac", "energy_proxy", "energy_per_token", "mean_firing_rate", "n_params")


def model_row(ckpt: Checkpoint, test: Sequence[Trajectory], grids: Sequence[MazeGrid], S: int,
              e_mac: float = 4.6, e_ac: float = 0.9) -> dict:
    ev = evaluate_per_step(ckpt.policy, test, ckpt.stats, S)
    fid, _ = evaluate_rollouts(ckpt.policy, grids, ckpt.stats) if grids else (FidelityReport(0.0, 0.0, None, 0), [])
    spikes = spike_report(ckpt.policy, test, ckpt.stats, S, e_mac, e_ac)
    return {
        "kind": ckpt.policy.kind,
        "test_loss": ev.loss,
        "test_acc": ev.accuracy,
        "goal_rate": fid.goal_rate,
        "exact_match_rate": fid.exact_match_rate,
        "mean_excess_steps": fid.mean_excess_steps,
        "n_mac": spikes["n_mac"],
        "n_ac": spikes["n_ac"],
        "energy_proxy": spikes["energy_proxy"],
        "energy_per_token": spikes["energy_per_token"],
        "mean_firing_rate": spikes["mean_firing_rate"],
        "firing_rates": spikes["firing_rates"],
        "n_params": ckpt.policy.n_params(),
    }


def compare_models(a: Checkpoint, b: Checkpoint, test: Sequence[Trajectory], grids: Sequence[MazeGrid], S: int,
                   e_mac: float = 4.6, e_ac: float = 0.9) -> dict:
    fa, fb = a.meta.get("data_fingerprint"), b.meta.get("data_fingerprint")
    if fa != fb:
        raise EvaluationError("checkpoints were trained on different dataset splits")
    ra = model_row(a, test, grids, S, e_mac, e_ac)
    rb = ra if b is a else model_row(b, test, grids, S, e_mac, e_ac)
    diff = {}
    for k in COMPARE_FIELDS:
        x, y = ra.get(k), rb.get(k)
        diff[k] = (y - x) if isinstance(x, (int, float)) and isinstance(y, (int, float)) else None
    return {"type": "comparison", "data_fingerprint": fa, "a": ra, "b": rb, "b_minus_a": diff}


# ---------------------------------------------------------------- files


def append_jsonl(path: str | Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")


def write_jsonl(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, default=_json_default) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_plot_data(epochs: Sequence[dict], batch_losses: Sequence[dict], confusion: np.ndarray | None,
                     out_dir: str | Path) -> list[Path]:
    """Write the four figure-equivalent CSVs and return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    rows = []
    for e in epochs:
        rows.append([e["epoch"], "train", e["train_loss"], e["train_acc"], e["train_loss_std"]])
        rows.append([e["epoch"], "val", e["val_loss"], e["val_acc"], ""])
    files.append(out / "loss_curves.csv")
    write_csv(files[-1], ["epoch", "split", "loss", "acc", "loss_std"], rows)
    files.append(out / "accuracy_curves.csv")
    write_csv(files[-1], ["epoch", "split", "loss", "acc"], [r[:4] for r in rows])
    files.append(out / "confusion_matrix.csv")
    names = ["left", "right", "up", "down"]
    cm = np.zeros((4, 4), dtype=int) if confusion is None else np.asarray(confusion)
    write_csv(files[-1], ["true\\pred"] + names, [[names[i]] + list(map(int, cm[i])) for i in range(4)])
    files.append(out / "first_epoch_batch_loss.csv")
    first = [b for b in batch_losses if b["epoch"] == min((x["epoch"] for x in batch_losses), default=1)]
    write_csv(files[-1], ["batch", "loss"], [[b["batch"], b["loss"]] for b in first])
    return files
