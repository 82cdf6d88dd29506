#!/usr/bin/env python3
"""Sweep the per-client rotation step and compare standalone training
against the anchor + logit protocol.

Usage: python scripts/rotation_benefit.py [--seeds 3] [--rounds 100]
"""

import argparse

import numpy as np

from anchorfed.data import SuiteConfig, generate_suite
from anchorfed.distill import DistillConfig, distill
from anchorfed.evaluation import evaluate_all
from anchorfed.protocol import RunConfig, run_experiment


def run_cell(suite, anchors, algorithm, rounds, seed):
    report = run_experiment(
        RunConfig(algorithm=algorithm, rounds=rounds, seed=seed),
        suite, anchors if algorithm == "desa" else None,
    )
    return evaluate_all([c.model for c in report.clients], suite).global_avg


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--rounds", type=int, default=100)
    args = ap.parse_args()

    print(f"{'rotation':>9} {'standalone':>11} {'desa':>8} {'gain':>7}")
    for step in (0.0, 30.0, 60.0, 90.0):
        sa, de = [], []
        for seed in range(args.seeds):
            suite = generate_suite(SuiteConfig(
                n_clients=3, samples_per_client=375, num_classes=4,
                rotation_step_deg=step, feature_dim=4, invariant_radius=1.0,
                seed=seed,
            ))
            anchors = [
                distill(c.train, DistillConfig(seed=seed * 100003 + c.client_id))
                for c in suite
            ]
            sa.append(run_cell(suite, None, "standalone", args.rounds, seed))
            de.append(run_cell(suite, anchors, "desa", args.rounds, seed))
        gain = np.mean(de) - np.mean(sa)
        print(f"{step:>8.0f}d {np.mean(sa):>11.3f} {np.mean(de):>8.3f} "
              f"{gain * 100:>+6.1f}pt")


if __name__ == "__main__":
    main()
