"""Acceptance criteria, each at its stated tolerance.

Every test registers one ``CRITERION n: PASS|FAIL ...`` line, printed in the
terminal summary. Criteria 1, 8 and 9 share one run of the scaled pipeline.
"""
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from strl import cli, dense, snn
from strl import numerics as nx
from strl.config import load_config
from strl.dataset import (
    apply_normalizer,
    encode,
    fit_normalizer,
    invert_normalizer,
    make_trajectory,
    returns_to_go,
    split_dataset,
)
from strl.maze import astar_solve, carve_lattice, generate_maze
from strl.numerics import Tensor
from strl.snn import LifConfig, ModelConfig

from conftest import ACCEPTANCE_LINES
from factories import perturb_from, random_batch
from oracles import bfs_length, masked_ce_loop, suffix_sums

REPO = Path(__file__).resolve().parents[1]


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def scaled(tmp_path_factory):
    out = tmp_path_factory.mktemp("scaled")
    cfg = replace(load_config(REPO / "configs" / "scaled.yaml"), output_dir=str(out))
    t0 = time.perf_counter()
    cli.cmd_gen_data(cfg)
    cli.cmd_train(cfg)
    t_train = time.perf_counter() - t0
    snn_eval = cli.cmd_eval(cfg)
    dt_cfg = replace(cfg, model=replace(cfg.model, kind="dt"))
    cli.cmd_train(dt_cfg)
    dt_eval = cli.cmd_eval(dt_cfg)
    table = cli.cmd_compare(cfg, [str(out / "snn" / "best.ckpt"), str(out / "dt" / "best.ckpt")])
    return {"cfg": cfg, "out": out, "snn_seconds": t_train, "snn": snn_eval, "dt": dt_eval, "table": table}


def test_criterion_1_scaled_accuracy(scaled):
    ev = scaled["snn"]
    acc, loss, secs = ev["accuracy"], ev["loss"], scaled["snn_seconds"]
    t = scaled["table"]
    detail = (f"SNN test acc {acc:.4f} (>= 0.90), test loss {loss:.4f} (<= 0.3), gen+train {secs:.0f}s (<= 1800s); "
              f"DT acc {t['b']['test_acc']:.4f} loss {t['b']['test_loss']:.4f} (reported)")
    report(1, acc >= 0.90 and loss <= 0.3 and secs <= 1800, detail)


def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    with nx.precision(np.float64):
        cfg = ModelConfig(d=8, L=1, h=2, d_hidden=16, S_max=4, init_std=0.3)
        lif = LifConfig(T_s=2, smooth=True, detach_reset=False)
        params = snn.init_params(cfg, seed=11)
        batch = random_batch(3, 4, seed=5, lengths=[4, 3, 2])

        def loss():
            return nx.cross_entropy_masked(snn.forward(batch, params, cfg, lif), batch.target_actions, batch.mask)

        for p in params.values():
            p.grad = None
        loss().backward()
        rng = np.random.default_rng(2024)
        names = list(params)
        sizes = np.array([params[k].data.size for k in names], dtype=float)
        worst, h, active = 0.0, 1e-6, 0
        for _ in range(20):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            arr = params[name].data
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            fp = loss().item()
            arr[idx] = old - h
            fm = loss().item()
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            an = params[name].grad[idx]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-7)
            worst = max(worst, err)
            active += abs(an) > 1e-6
    secs = time.perf_counter() - t0
    report(2, worst <= 1e-3 and secs < 60 and active >= 10,
           f"max relative error {worst:.2e} over 20 parameters ({active} with |grad| > 1e-6) (<= 1e-3), {secs:.1f}s")


def test_criterion_3_lif_traces():
    def trace(currents):
        with nx.precision(np.float64):
            s, r = snn.lif_multistep(Tensor(np.array(currents)[:, None]), LifConfig(T_s=len(currents)))
        return s.data[:, 0].tolist(), float(r.data[0])

    ok = trace([1.2]) == ([1.0], 1.0)
    ok &= trace([0.6, 0.6]) == ([0.0, 0.0], 0.0)
    ok &= trace([0.8, 0.8]) == ([0.0, 1.0], 0.5)
    spikes, rate = snn.lif_multistep(Tensor(np.random.default_rng(0).normal(1, 1, size=(4, 50, 8))), LifConfig())
    ok &= set(np.unique(spikes.data)) <= {0.0, 1.0}
    ok &= bool(np.all(rate.data * 4 == np.round(rate.data * 4)))
    report(3, ok, "three hand traces exact, spikes binary, rates on the 1/T_s grid")


def test_criterion_4_astar_bfs():
    t0 = time.perf_counter()
    mismatches = tree_failures = 0
    for W, n in ((9, 1000), (21, 100)):
        for seed in range(n):
            g = generate_maze(seed, W, W)
            mismatches += len(astar_solve(g)) - 1 != bfs_length(g)
            cells = carve_lattice(seed, W, W)
            rooms = int((cells[1::2, 1::2] == 0).sum())
            knocked = int((cells == 0).sum()) - rooms
            tree_failures += knocked != rooms - 1
    secs = time.perf_counter() - t0
    report(4, mismatches == 0 and tree_failures == 0 and secs < 60,
           f"{mismatches} path-length mismatches, {tree_failures} tree violations over 1100 mazes, {secs:.1f}s")


def test_criterion_5_dataset_oracles():
    rng = np.random.default_rng(55)
    trajs = []
    for i in range(100):
        T = int(rng.integers(1, 60))
        states = rng.normal(0, 5, size=(T, 2))
        trajs.append(make_trajectory(states, rng.integers(0, 4, size=T), rng.normal(size=T), seed=i))
    rtg_ok = all(np.allclose(returns_to_go(t.rewards), suffix_sums(t.rewards), atol=1e-9, rtol=0) for t in trajs)

    stats = fit_normalizer([s for t in trajs for s in t.states])
    allz = np.concatenate([apply_normalizer(stats, np.array(t.states)) for t in trajs])
    norm_ok = bool(np.all(np.abs(allz.mean(axis=0)) < 1e-9))
    norm_ok &= all(np.allclose(invert_normalizer(stats, apply_normalizer(stats, np.array(t.states))), t.states, atol=1e-6)
                   for t in trajs)

    b = encode(trajs, 64, stats)
    logits = rng.normal(size=(100, 64, 4))
    with nx.precision(np.float64):
        got = nx.cross_entropy_masked(Tensor(logits), b.target_actions, b.mask).item()
    flat = np.concatenate([logits[i, : min(len(t), 64)] for i, t in enumerate(trajs)])[None]
    tg = np.concatenate([t.actions[:64] for t in trajs])[None]
    mask_ok = math.isclose(got, masked_ce_loop(flat, tg, np.ones_like(tg, bool)), rel_tol=1e-10)

    parts = split_dataset(trajs, seed=1)
    keys = [{t.seed for t in p} for p in parts]
    split_ok = [len(p) for p in parts] == [70, 15, 15] and set().union(*keys) == set(range(100))
    split_ok &= not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
    report(5, rtg_ok and norm_ok and mask_ok and split_ok,
           f"returns-to-go {rtg_ok}, normalization {norm_ok}, masked loss {mask_ok}, split {split_ok} on 100 trajectories")


def test_criterion_6_causality():
    cfg = ModelConfig(d=32, L=2, h=4, d_hidden=64, S_max=20, init_std=0.3)
    lif = LifConfig()
    p = snn.init_params(cfg, seed=6)
    rng = np.random.default_rng(6)
    bad = {"snn": 0, "dt": 0}
    for trial in range(50):
        b = random_batch(2, 20, seed=trial)
        t = int(rng.integers(1, 20))
        pert = perturb_from(b, t, seed=10_000 + trial)
        bad["snn"] += not np.array_equal(snn.forward(b, p, cfg, lif).data[:, :t], snn.forward(pert, p, cfg, lif).data[:, :t])
        bad["dt"] += not np.array_equal(dense.dt_forward(b, p, cfg).data[:, :t], dense.dt_forward(pert, p, cfg).data[:, :t])
    report(6, bad == {"snn": 0, "dt": 0}, f"violations over 50 trials: {bad}")


def test_criterion_7_determinism(tmp_path):
    snapshots = []
    for rep in ("a", "b"):
        cfg = replace(load_config(REPO / "configs" / "smoke.yaml"), output_dir=str(tmp_path / rep))
        cli.cmd_gen_data(cfg)
        cli.cmd_train(cfg)
        cli.cmd_eval(cfg)
        base = tmp_path / rep
        files = ["data/corpus.jsonl", "data/splits.json", "data/norm_stats.json",
                 "snn/metrics.jsonl", "snn/batch_losses.csv", "snn/eval.jsonl"]
        snapshots.append({f: (base / f).read_bytes() for f in files})
    same = [f for f in snapshots[0] if snapshots[0][f] == snapshots[1][f]]
    report(7, len(same) == len(snapshots[0]), f"{len(same)}/{len(snapshots[0])} artifact files identical across reruns")


def test_criterion_8_first_epoch_loss_drop(scaled):
    rows = (scaled["out"] / "snn" / "batch_losses.csv").read_text().splitlines()[1:]
    losses = [float(r.split(",")[2]) for r in rows if r.split(",")[0] == "1"]
    first = losses[0]
    hit = next((i for i, v in enumerate(losses[:50]) if v < 0.5 * first), None)
    report(8, hit is not None,
           f"initial batch loss {first:.3f}; below {0.5 * first:.3f} at batch {hit} (needs < 50)")


def test_criterion_9_spike_report(scaled):
    s, d = scaled["snn"]["spikes"], scaled["dt"]["spikes"]
    rate = s["mean_firing_rate"]
    counts_ok = all(k in r and r[k] is not None for r in (s, d) for k in ("n_mac", "n_ac", "energy_proxy"))
    detail = (f"SNN mean firing rate {rate:.4f}; energy/token SNN {s['energy_per_token']:.0f} "
              f"(MAC {s['mac_per_token']:.0f}, AC {s['ac_per_token']:.0f}) vs DT {d['energy_per_token']:.0f} "
              f"(MAC {d['mac_per_token']:.0f})")
    (scaled["out"] / "spike_report.json").write_text(json.dumps({"snn": s, "dt": d}, sort_keys=True))
    report(9, 0.0 < rate < 1.0 and counts_ok, detail)
