"""Convergence comparison across seeds: injected training (frozen backbone,
knowledge pathway only) versus full fine-tuning of the same model on the
same data and schedule. Prints steps-to-threshold and the ratio per seed.

Usage:
    python scripts/convergence_study.py [--seeds 3] [--threshold 1.0]
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from forgelab.synthesis import toy_face_dataset  # noqa: E402
from forgelab.training import convergence_report, train  # noqa: E402
from forgelab.visualize import save_loss_curves  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--faces", type=int, default=200)
    parser.add_argument("--threshold", type=float, default=1.0)
    parser.add_argument("--component", default="total")
    parser.add_argument("--out", default="runs/convergence")
    args = parser.parse_args()

    from run_toy_experiment import toy_config

    torch.set_num_threads(2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ratios = []
    for seed in range(args.seeds):
        config = toy_config(seed)
        reals = toy_face_dataset(args.faces, np.random.default_rng(seed), image_size=64)
        injected = train(config, reals)
        full = train(dataclasses.replace(config, mode="full_finetune"), reals)
        report = convergence_report(injected, full, args.threshold, component=args.component)
        save_loss_curves({"injected": injected.log, "full_finetune": full.log},
                         out / f"loss_seed{seed}.png", component=args.component)
        if report.unreachable:
            print(f"seed {seed}: threshold {args.threshold} unreachable "
                  f"(injected {report.steps_injected}, full {report.steps_full})")
        else:
            ratios.append(report.ratio)
            print(f"seed {seed}: injected {report.steps_injected} steps, "
                  f"full {report.steps_full} steps, ratio {report.ratio:.2f}x")
    if ratios:
        print(f"median ratio over {len(ratios)} seeds: {np.median(ratios):.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
