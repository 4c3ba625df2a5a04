"""Compare the four fusion methods on a synthetic preset.

    python scripts/fusion_experiment.py --preset complementary --seed 1
    python scripts/fusion_experiment.py --preset degraded --seed 1
"""

import argparse

import numpy as np

from statfuse.calibration import RegularizationConfig, calibrate, fit_model
from statfuse.fusion import fuse
from statfuse.metrics import evaluate_batch, format_table
from statfuse.synth import build_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="complementary", choices=["complementary", "degraded"])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--beta", type=float, default=0.0)
    ap.add_argument("--delta", type=float, default=0.0)
    args = ap.parse_args()

    sc = build_scenario(args.preset, args.seed, height=args.size, width=args.size, samples=6)
    calib = calibrate(sc.dev_scores, sc.dev_gt, sc.class_set)
    model, _ = fit_model(calib, RegularizationConfig(args.beta, args.delta))

    n = len(sc.test_gt)
    preds = {e: [np.argmax(y, axis=-1) for y in maps] for e, maps in sc.test_scores.items()}
    for method in ("bayes", "dirichlet", "average"):
        preds[method] = [fuse(method, {e: v[i] for e, v in sc.test_scores.items()}, model).labels for i in range(n)]
    preds["variance"] = [fuse("variance", {e: v[i] for e, v in sc.test_samples.items()}).labels for i in range(n)]
    reports = {name: evaluate_batch(p, sc.test_gt, sc.class_set) for name, p in preds.items()}
    print(f"preset {args.preset}, seed {args.seed}, {args.size}x{args.size}")
    print(format_table(reports, "iou"))


if __name__ == "__main__":
    main()
