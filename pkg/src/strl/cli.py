"""Command-line entry point: ``strl <verb> [--config PATH] [--seed N] [--out DIR] ...``"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .config import RunConfig, dump_config, load_config
from .dataset import NormStats, Trajectory, fit_normalizer, read_corpus, split_dataset, write_corpus
from .maze import generate_maze, sample_expert
from .policy import Checkpoint, Policy, load_checkpoint, save_checkpoint
from .trainer import train

log = logging.getLogger("strl")

SPLITS = ("train", "val", "test")


class MissingArtifact(FileNotFoundError):
    pass


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def run_dir(cfg: RunConfig, kind: str | None = None) -> Path:
    return Path(cfg.output_dir) / (kind or cfg.model.kind)


# ---------------------------------------------------------------- data


def write_dataset(cfg: RunConfig, trajs: list[Trajectory], source: dict) -> dict:
    """Split, fit the normalizer on the training split, and write the data directory."""
    train_set, val_set, test_set = split_dataset(trajs, cfg.dataset.fractions, cfg.dataset.split_seed)
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    stats = fit_normalizer([s for t in train_set for s in t.states])
    out = data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    corpus = out / "corpus.jsonl"
    write_corpus(corpus, trajs)
    split_seeds = {name: sorted({t.seed for t in part}) for name, part in zip(SPLITS, (train_set, val_set, test_set))}
    digest = hashlib.sha256(corpus.read_bytes())
    digest.update(json.dumps(split_seeds, sort_keys=True).encode())
    manifest = {
        "counts": {name: len(part) for name, part in zip(SPLITS, (train_set, val_set, test_set))},
        "fractions": list(cfg.dataset.fractions),
        "split_seed": cfg.dataset.split_seed,
        "seeds": split_seeds,
        "fingerprint": digest.hexdigest(),
        "source": source,
    }
    (out / "splits.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_dataset(cfg: RunConfig) -> tuple[dict[str, list[Trajectory]], NormStats, dict]:
    d = data_dir(cfg)
    trajs = read_corpus(_need(d / "corpus.jsonl"))
    manifest = json.loads(_need(d / "splits.json").read_text(encoding="utf-8"))
    stats = NormStats.from_dict(json.loads(_need(d / "norm_stats.json").read_text(encoding="utf-8")))
    where = {}
    for name in SPLITS:
        for s in manifest["seeds"][name]:
            where[s] = name
    parts: dict[str, list[Trajectory]] = {name: [] for name in SPLITS}
    for t in trajs:
        parts[where[t.seed]].append(t)
    return parts, stats, manifest


def generate_corpus(cfg: RunConfig) -> list[Trajectory]:
    m = cfg.maze
    base = np.random.SeedSequence(m.seed)
    seeds = base.generate_state(m.count, np.uint64)
    out, used = [], set()
    for s in seeds:
        _, traj = sample_expert(int(s) & 0x7FFFFFFFFFFFFFFF, m.W, m.H)
        if traj.seed in used:
            continue
        used.add(traj.seed)
        out.append(traj)
    return out


def read_interchange(path: str | Path, counters: dict, file_index: int = 0) -> list[Trajectory]:
    trajs = read_corpus(path, counters)
    for i, t in enumerate(trajs, start=1):
        # imported layouts get negative keys so they never collide with maze seeds
        if t.width == 0:
            t.seed = -(file_index * 10_000_000 + i)
    return trajs


def cmd_gen_data(cfg: RunConfig) -> dict:
    trajs = generate_corpus(cfg)
    counters: dict = {}
    for i, p in enumerate(cfg.dataset.interchange_paths):
        trajs.extend(read_interchange(p, counters, i))
    src = {"kind": "procedural", "W": cfg.maze.W, "H": cfg.maze.H, "count": cfg.maze.count, "seed": cfg.maze.seed,
           "interchange_paths": list(cfg.dataset.interchange_paths), "warnings": counters}
    return write_dataset(cfg, trajs, src)


def cmd_import(cfg: RunConfig, path: str) -> dict:
    counters: dict = {}
    trajs = read_interchange(path, counters)
    return write_dataset(cfg, trajs, {"kind": "interchange", "path": str(path), "warnings": counters})


# ---------------------------------------------------------------- training / evaluation


def cmd_train(cfg: RunConfig) -> dict:
    parts, stats, manifest = load_dataset(cfg)
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    policy = Policy.create(cfg.model.kind, cfg.model.config, cfg.model.lif, cfg.model.init_seed)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")
    timing_path = out / "timing.jsonl"
    timing_path.write_text("", encoding="utf-8")

    def on_epoch(rec):
        d = rec.to_dict()
        seconds = d.pop("seconds")
        metrics.append_jsonl(metrics_path, dict(d, type="epoch", kind=cfg.model.kind))
        metrics.append_jsonl(timing_path, {"epoch": rec.epoch, "seconds": seconds})

    result = train(policy, parts["train"], parts["val"], cfg.train, cfg.dataset.seq_len, stats,
                   meta={"data_fingerprint": manifest["fingerprint"]}, on_epoch=on_epoch)
    save_checkpoint(out / "best.ckpt", result.best)
    metrics.write_csv(out / "batch_losses.csv", ["epoch", "batch", "loss"], result.batch_losses)
    return {"checkpoint": str(out / "best.ckpt"), "best_epoch": result.best.meta["epoch"],
            "best_val_acc": result.best.meta["val_acc"], "epochs": len(result.records), "diverged": result.diverged}


def _checkpoint(cfg: RunConfig, path: str | None) -> tuple[Checkpoint, Path]:
    p = Path(path) if path else run_dir(cfg) / "best.ckpt"
    return load_checkpoint(_need(p)), p.parent


def _verify(ckpt: Checkpoint, stats: NormStats, manifest: dict) -> None:
    metrics.check_stats(ckpt, stats)
    fp = ckpt.meta.get("data_fingerprint")
    if fp is not None and fp != manifest["fingerprint"]:
        raise metrics.EvaluationError("checkpoint was trained on a different dataset split")


def rollout_grids(cfg: RunConfig, test: Sequence[Trajectory]):
    grids = [generate_maze(t.seed, t.width, t.height) for t in test if t.width > 0]
    if cfg.eval.rollout_limit > 0:
        grids = grids[: cfg.eval.rollout_limit]
    return grids


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    parts, stats, manifest = load_dataset(cfg)
    ckpt, out = _checkpoint(cfg, checkpoint)
    _verify(ckpt, stats, manifest)
    S = cfg.dataset.seq_len
    ev = metrics.evaluate_per_step(ckpt.policy, parts["test"], stats, S)
    spikes = metrics.spike_report(ckpt.policy, parts["test"], stats, S, cfg.eval.e_mac, cfg.eval.e_ac)
    record = dict(ev.to_dict(), type="eval", split="test", kind=ckpt.policy.kind, spikes=spikes,
                  best_epoch=ckpt.meta.get("epoch"))
    metrics.write_jsonl(out / "eval.jsonl", [record])
    return record


def cmd_rollout(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    parts, stats, manifest = load_dataset(cfg)
    ckpt, out = _checkpoint(cfg, checkpoint)
    _verify(ckpt, stats, manifest)
    report, results = metrics.evaluate_rollouts(ckpt.policy, rollout_grids(cfg, parts["test"]), stats)
    record = dict(report.to_dict(), type="rollout", kind=ckpt.policy.kind)
    metrics.write_jsonl(out / "rollout.jsonl", [record] + [
        {"type": "rollout_maze", "seed": r.seed, "reached_goal": r.reached_goal, "exact_match": r.exact_match,
         "steps": r.steps, "optimal_moves": r.optimal_moves} for r in results])
    return record


def cmd_compare(cfg: RunConfig, checkpoints: Sequence[str]) -> dict:
    if len(checkpoints) != 2:
        raise ValueError("compare needs exactly two --checkpoint arguments")
    parts, stats, manifest = load_dataset(cfg)
    a = load_checkpoint(_need(Path(checkpoints[0])))
    b = a if Path(checkpoints[0]).resolve() == Path(checkpoints[1]).resolve() else load_checkpoint(_need(Path(checkpoints[1])))
    for c in (a, b):
        _verify(c, stats, manifest)
    table = metrics.compare_models(a, b, parts["test"], rollout_grids(cfg, parts["test"]), cfg.dataset.seq_len,
                                   cfg.eval.e_mac, cfg.eval.e_ac)
    table["checkpoints"] = [str(c) for c in checkpoints]
    metrics.write_jsonl(Path(cfg.output_dir) / "compare.jsonl", [table])
    return table


def cmd_export_plots(run: str | Path) -> dict:
    run = Path(run)
    epochs = metrics.read_jsonl(_need(run / "metrics.jsonl"))
    with open(_need(run / "batch_losses.csv"), encoding="utf-8") as fh:
        batches = [{"epoch": int(r["epoch"]), "batch": int(r["batch"]), "loss": float(r["loss"])} for r in csv.DictReader(fh)]
    ev = metrics.read_jsonl(_need(run / "eval.jsonl"))[0]
    files = metrics.export_plot_data(epochs, batches, np.asarray(ev["confusion"]), run / "plots")
    return {"files": [str(f) for f in files]}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="strl", description="Spiking-transformer offline RL on grid mazes.")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", help="override the output directory")
        return p

    common(sub.add_parser("gen-data", help="generate, solve, label and split mazes"))
    p = common(sub.add_parser("import", help="import an interchange trajectory file"))
    p.add_argument("path")
    common(sub.add_parser("train", help="train the configured model kind"))
    for verb, desc in (("eval", "per-step accuracy, confusion and spike report on the test split"),
                       ("rollout", "greedy closed-loop rollouts on the test mazes")):
        p = common(sub.add_parser(verb, help=desc))
        p.add_argument("--checkpoint")
    p = common(sub.add_parser("compare", help="side-by-side table for two checkpoints"))
    p.add_argument("--checkpoint", action="append", default=[], help="give twice")
    p = common(sub.add_parser("export-plots", help="write figure CSVs for a finished run"))
    p.add_argument("run_dir", nargs="?", help="defaults to <out>/<model kind>")
    common(sub.add_parser("show-config", help="print the effective configuration"))
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def dispatch(args) -> dict | str:
    cfg = resolve_config(args)
    verb = args.verb
    if verb == "gen-data":
        return cmd_gen_data(cfg)
    if verb == "import":
        return cmd_import(cfg, args.path)
    if verb == "train":
        return cmd_train(cfg)
    if verb == "eval":
        return cmd_eval(cfg, args.checkpoint)
    if verb == "rollout":
        return cmd_rollout(cfg, args.checkpoint)
    if verb == "compare":
        return cmd_compare(cfg, args.checkpoint)
    if verb == "export-plots":
        return cmd_export_plots(args.run_dir or run_dir(cfg))
    if verb == "show-config":
        return dump_config(cfg)
    raise ValueError(f"unknown verb {verb}")


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        result = dispatch(args)
    except Exception as exc:  # single-line machine-readable failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if isinstance(result, str):
        sys.stdout.write(result)
    else:
        print(json.dumps(result, sort_keys=True, default=metrics._json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
