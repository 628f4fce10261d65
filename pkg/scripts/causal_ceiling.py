#!/usr/bin/env python3
"""Estimate the teacher-forced accuracy reachable by any causal policy on unseen mazes.

A causal policy at step t only knows the visited positions, earlier actions and
the return-to-go. On a held-out maze the wall layout ahead is unknown, so at
junctions it must guess. This script fits a lookup table keyed on
(position, previous action, return-to-go) with majority votes from the training
split and scores it on the test split. With many training mazes the table
approaches the Bayes-optimal guess for these features, which gives a rough
ceiling for the scaled acceptance gate.

    python3 scripts/causal_ceiling.py [--config configs/scaled.yaml] [--count N]
"""
from __future__ import annotations

import argparse
from collections import Counter, defaultdict
from dataclasses import replace

from strl.cli import generate_corpus
from strl.config import load_config
from strl.dataset import DUMMY_ACTION, split_dataset


def features(traj, t):
    prev = traj.actions[t - 1] if t else DUMMY_ACTION
    return tuple(map(int, traj.states[t])), prev, round(traj.returns_to_go[t], 1)


def fit(trajs):
    table = defaultdict(Counter)
    by_pos = defaultdict(Counter)
    for tr in trajs:
        for t, a in enumerate(tr.actions):
            key = features(tr, t)
            table[key][a] += 1
            by_pos[key[:2]][a] += 1
    return table, by_pos


def score(trajs, table, by_pos) -> float:
    hit = n = 0
    for tr in trajs:
        for t, a in enumerate(tr.actions):
            key = features(tr, t)
            votes = table.get(key) or by_pos.get(key[:2]) or Counter({1: 1})
            hit += votes.most_common(1)[0][0] == a
            n += 1
    return hit / n


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/scaled.yaml")
    ap.add_argument("--count", type=int, nargs="+", default=[2000, 20000])
    args = ap.parse_args()
    cfg = load_config(args.config)
    for count in args.count:
        c = replace(cfg, maze=replace(cfg.maze, count=count))
        train, _, test = split_dataset(generate_corpus(c), c.dataset.fractions, c.dataset.split_seed)
        table, by_pos = fit(train)
        print(f"{count:>6} mazes: train acc {score(train, table, by_pos):.4f}  "
              f"test acc {score(test, table, by_pos):.4f}")


if __name__ == "__main__":
    main()
