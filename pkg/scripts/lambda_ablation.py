#!/usr/bin/env python3
"""Ablate the contrastive and distillation loss weights on the rotation
benchmark and print a small table of averaged global accuracies.

Usage: python scripts/lambda_ablation.py [--seeds 3] [--rounds 100]
"""

import argparse

import numpy as np

from anchorfed.data import SuiteConfig, generate_suite
from anchorfed.distill import DistillConfig, distill
from anchorfed.evaluation import evaluate_all
from anchorfed.protocol import RunConfig, run_experiment

SETTINGS = [
    ("full", 1.0, 1.0),
    ("no-reg", 0.0, 1.0),
    ("no-kd", 1.0, 0.0),
    ("ce-only", 0.0, 0.0),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--rounds", type=int, default=100)
    args = ap.parse_args()

    accs = {name: [] for name, _, _ in SETTINGS}
    for seed in range(args.seeds):
        suite = generate_suite(SuiteConfig(
            n_clients=3, samples_per_client=375, num_classes=4,
            rotation_step_deg=60.0, feature_dim=4, invariant_radius=1.0,
            seed=seed,
        ))
        anchors = [
            distill(c.train, DistillConfig(seed=seed * 100003 + c.client_id))
            for c in suite
        ]
        for name, lam_reg, lam_kd in SETTINGS:
            report = run_experiment(
                RunConfig(rounds=args.rounds, seed=seed,
                          lam_reg=lam_reg, lam_kd=lam_kd),
                suite, anchors,
            )
            acc = evaluate_all([c.model for c in report.clients], suite)
            accs[name].append(acc.global_avg)

    print(f"{'setting':>9} {'lam_reg':>8} {'lam_kd':>7} {'global_acc':>11}")
    for name, lam_reg, lam_kd in SETTINGS:
        print(f"{name:>9} {lam_reg:>8.1f} {lam_kd:>7.1f} "
              f"{np.mean(accs[name]):>11.3f}")


if __name__ == "__main__":
    main()
