#!/usr/bin/env python3
"""Scaled SNN vs DT experiment: generate data, train both kinds, evaluate, compare.

    python3 scripts/run_scaled.py [--config configs/scaled.yaml] [--out runs/scaled] [--non-causal]

``--non-causal`` reruns both models with the attention mask switched off, which
lets every position see the whole episode (an ablation, not a valid policy).
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from strl import cli
from strl.config import load_config


def run(cfg, kinds=("snn", "dt")) -> dict:
    out = Path(cfg.output_dir)
    if not (out / "data" / "splits.json").exists():
        cli.cmd_gen_data(cfg)
    rows = {}
    for kind in kinds:
        kcfg = replace(cfg, model=replace(cfg.model, kind=kind))
        t0 = time.perf_counter()
        trained = cli.cmd_train(kcfg)
        ev = cli.cmd_eval(kcfg)
        ro = cli.cmd_rollout(kcfg)
        cli.cmd_export_plots(cli.run_dir(kcfg))
        rows[kind] = {
            "best_epoch": trained["best_epoch"],
            "test_acc": ev["accuracy"],
            "test_loss": ev["loss"],
            "goal_rate": ro["goal_rate"],
            "exact_match_rate": ro["exact_match_rate"],
            "mean_firing_rate": ev["spikes"]["mean_firing_rate"],
            "energy_per_token": ev["spikes"]["energy_per_token"],
            "seconds": round(time.perf_counter() - t0, 1),
        }
    if len(kinds) == 2:
        cli.cmd_compare(cfg, [str(out / k / "best.ckpt") for k in kinds])
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/scaled.yaml")
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--non-causal", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    results = {"causal": run(cfg)}
    if args.non_causal:
        nc = replace(cfg, output_dir=str(Path(cfg.output_dir) / "non_causal"),
                     model=replace(cfg.model, config=replace(cfg.model.config, causal=False)))
        # reuse the causal run's data directory so both see identical splits
        data = Path(nc.output_dir) / "data"
        if not data.exists():
            data.parent.mkdir(parents=True, exist_ok=True)
            data.symlink_to(Path(cfg.output_dir, "data").resolve(), target_is_directory=True)
        results["non_causal"] = run(nc)
    summary = Path(cfg.output_dir) / "summary.json"
    summary.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    print(json.dumps(results, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
