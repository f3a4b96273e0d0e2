#!/usr/bin/env python3
"""End-to-end toy benchmark: pretrain, equilibrium and unrolled training,
plug-and-play baseline, and the inference-iteration sweep.

Run from the repository root:

    python3 scripts/toy_benchmark.py [--fast]
"""

import argparse
import copy
import sys
import time

import numpy as np

from hsdeconv.cube import SpectralCube
from hsdeconv.degrade import apply_degradation, scenario_preset
from hsdeconv.denoiser import build_denoiser, estimate_lipschitz
from hsdeconv.fixedpoint import FixedPointConfig, infer
from hsdeconv.metrics import psnr_only
from hsdeconv.synth import synth_cubes
from hsdeconv.training import TrainConfig, infer_pnp, pretrain_denoiser, train_deq, train_du
from hsdeconv.util import derive_seed


def degrade_pairs(cubes, tag, master_seed, label):
    pairs = []
    for i, cube in enumerate(cubes):
        scen = scenario_preset(tag, derive_seed(master_seed, "degrade", label, i))
        pairs.append((cube, apply_degradation(cube, scen)))
    return pairs


def mean_psnr(pairs, restore):
    return float(np.mean([psnr_only(restore(x, y), x) for x, y in pairs]))


def run_benchmark(seed=0, n_train=20, n_test=10, size=16, bands=4, hidden=8,
                  pre_epochs=50, train_epochs=30, unroll_depth=10, verbose=True):
    t0 = time.time()
    cubes = synth_cubes(n_train + n_test, size, size, bands,
                        seed=derive_seed(seed, "dataset"))
    train_cubes, test_cubes = cubes[:n_train], cubes[n_train:]
    train_pairs = degrade_pairs(train_cubes, "a", seed, "train")
    test_pairs = degrade_pairs(test_cubes, "a", seed, "test")
    kernel = scenario_preset("a").kernel

    model = build_denoiser(bands, hidden=hidden, n_layers=6, mu_target=1.0,
                           sn_size=(size, size), seed=derive_seed(seed, "model"))
    pre_cfg = TrainConfig(mode="pretrain", epochs=pre_epochs, batch_size=4,
                          lr_schedule=((pre_epochs, 2e-3),), seed=derive_seed(seed, "pre"))
    pretrain_denoiser(train_cubes, model, pre_cfg)
    pretrained = model
    t_pre = time.time()

    fp = FixedPointConfig(max_iters=15, tol=1e-6, anderson_m=5)
    deq_cfg = TrainConfig(mode="deq", epochs=train_epochs, batch_size=4,
                          lr_schedule=((max(train_epochs - 10, 1), 1e-3), (10, 1e-4)),
                          fixed_point=fp, seed=derive_seed(seed, "deq"))
    deq_run = train_deq(train_pairs, kernel, copy.deepcopy(pretrained), deq_cfg)
    t_deq = time.time()

    du_cfg = TrainConfig(mode="du", epochs=train_epochs, batch_size=4,
                         lr_schedule=((max(train_epochs - 10, 1), 1e-3), (10, 1e-4)),
                         unroll_depth=unroll_depth, seed=derive_seed(seed, "du"))
    du_run = train_du(train_pairs, kernel, copy.deepcopy(pretrained), du_cfg)
    t_du = time.time()

    results = {}
    results["degraded"] = mean_psnr(test_pairs, lambda x, y: y)
    results["pnp"] = mean_psnr(
        test_pairs, lambda x, y: infer_pnp(y, kernel, pretrained, b=1.5, iters=30)[0])
    for iters in (15, 30, 60):
        results[f"deq@{iters}"] = mean_psnr(
            test_pairs, lambda x, y: infer(y, kernel, deq_run.model, deq_run.b,
                                           fp.replace(max_iters=iters))[0])
    for iters in (unroll_depth, 30):
        du_fp = FixedPointConfig(max_iters=iters, tol=0.0, anderson_m=0)
        results[f"du@{iters}"] = mean_psnr(
            test_pairs, lambda x, y: infer(y, kernel, du_run.model, du_run.b, du_fp)[0])
    t_end = time.time()

    info = {
        "results": results,
        "deq_b": deq_run.b,
        "deq_loss": (deq_run.losses[0], deq_run.losses[-1]),
        "du_loss": (du_run.losses[0], du_run.losses[-1]),
        "mu_pretrained": estimate_lipschitz(pretrained, trials=60,
                                            seed=derive_seed(seed, "mu")),
        "seconds": {"pretrain": t_pre - t0, "train_deq": t_deq - t_pre,
                    "train_du": t_du - t_deq, "eval": t_end - t_du,
                    "total": t_end - t0},
        "runs": {"deq": deq_run, "du": du_run, "pretrained": pretrained,
                 "test_pairs": test_pairs, "kernel": kernel},
    }
    if verbose:
        for key, val in results.items():
            print(f"  {key:>10}: {val:6.2f} dB")
        print(f"  trained b: {info['deq_b']:.3f}  mu(pretrained): {info['mu_pretrained']:.3f}")
        print(f"  times: " + ", ".join(f"{k} {v:.1f}s" for k, v in info["seconds"].items()))
    return info


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--fast", action="store_true", help="smaller run for smoke checks")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.fast:
        run_benchmark(seed=args.seed, n_train=6, n_test=3, pre_epochs=10,
                      train_epochs=5)
    else:
        run_benchmark(seed=args.seed)
