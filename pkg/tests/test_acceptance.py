"""Acceptance criteria, one test per criterion.

Each test also prints a ``criterion N: PASS|FAIL`` line; the conftest hook
repeats them as a block at the end of the session.  Run on its own with
``pytest tests/test_acceptance.py -s``.
"""

import math
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from statfuse.calibration import (
    RegularizationConfig,
    calibrate,
    evaluate_grid_point,
    fit_dirichlet_mle,
    fit_dirichlet_regularized,
    fit_model,
    grid_search,
)
from statfuse.cli import run
from statfuse.core import ClassPrior, ClassSet, ExpertModel, FusionModel
from statfuse.fusion import certainty, fuse_average, fuse_bayes, fuse_dirichlet, fuse_variance
from statfuse.metrics import evaluate, evaluate_batch
from statfuse.synth import build_scenario


def report(number, ok, detail=""):
    print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1 ----------------------------------------------------------------------


def brute_force(outs, confusions, prior, smoothing):
    k_count = len(prior)
    scores = []
    for k in range(k_count):
        total = math.log(prior[k])
        for out, m in zip(outs, confusions):
            col = sum(m[j][k] + smoothing for j in range(k_count))
            total += math.log((m[out][k] + smoothing) / col)
        scores.append(total)
    best = max(range(k_count), key=lambda k: (scores[k], -k))
    return best, scores


@pytest.mark.criterion(1, "Bayes fusion equals a brute-force oracle")
def test_c1_bayes_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    elements = label_errors = 0
    worst = 0.0
    while elements < 10_000:
        k = int(rng.integers(2, 5))
        n_exp = int(rng.integers(1, 4))
        confusions = [rng.integers(0, 50, size=(k, k)) for _ in range(n_exp)]
        smoothing = float(rng.choice([0.5, 1.0, 2.0]))
        prior = rng.dirichlet(np.ones(k))
        model = FusionModel(
            ClassSet.generic(k),
            {f"e{i}": ExpertModel(c) for i, c in enumerate(confusions)},
            ClassPrior.from_probs(prior),
            smoothing=smoothing,
        )
        n = 200
        labels = {f"e{i}": rng.integers(0, k, size=n) for i in range(n_exp)}
        fused = fuse_bayes(labels, model, keep_scores=True)
        lists = [c.tolist() for c in confusions]
        for p in range(n):
            lab, sc = brute_force([int(labels[f"e{i}"][p]) for i in range(n_exp)], lists, model.prior.probs, smoothing)
            label_errors += int(fused.labels[p] != lab)
            worst = max(worst, float(np.max(np.abs(fused.scores[p] - sc))))
        elements += n
    elapsed = time.perf_counter() - start
    report(
        1,
        label_errors == 0 and worst <= 1e-9 and elapsed < 10,
        f"{elements} elements, label mismatches {label_errors}, max score error {worst:.2e}, {elapsed:.1f} s",
    )


# -- 2 ----------------------------------------------------------------------


@pytest.mark.criterion(2, "Dirichlet MLE recovers sampled parameters")
def test_c2_mle_recovery():
    start = time.perf_counter()
    cases = [((2.0, 2.0, 2.0), 0.03), ((0.5, 5.0), 0.05), ((1.0, 2.0, 3.0, 4.0, 5.0), 0.05)]
    worst = []
    for i, (alpha, tol) in enumerate(cases):
        y = np.random.default_rng(100 + i).dirichlet(alpha, size=100_000)
        s = np.log(np.clip(y, 1e-10, 1.0)).mean(axis=0)
        fit = fit_dirichlet_mle(s, 100_000)
        err = float(np.max(np.abs(fit.alpha / np.array(alpha) - 1)))
        worst.append((err, tol, fit.converged))
    elapsed = time.perf_counter() - start
    ok = all(e <= t and c for e, t, c in worst) and elapsed < 30
    report(2, ok, "max rel errors " + ", ".join(f"{e:.4f}/{t}" for e, t, _ in worst) + f", {elapsed:.1f} s")


# -- 3 ----------------------------------------------------------------------


def _sample_stat(alpha, n, seed):
    y = np.random.default_rng(seed).dirichlet(alpha, size=n)
    return np.log(np.clip(y, 1e-10, 1.0)).mean(axis=0)


@pytest.mark.criterion(3, "regularised fit: MLE reduction, monotone ascent, delta shrinkage")
def test_c3_regularized_contracts():
    s = _sample_stat((1.5, 4.0, 0.7, 2.2), 20_000, 1)
    mle = fit_dirichlet_mle(s, 20_000).alpha
    reg = fit_dirichlet_regularized(s, _sample_stat((3.0, 1.0, 1.0, 1.0), 20_000, 2), RegularizationConfig(0.0, 0.0))
    a_err = float(np.max(np.abs(reg.alpha - mle)))

    decreases = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        s1 = _sample_stat(rng.uniform(0.5, 8, size=k), 500, seed)
        s2 = _sample_stat(rng.uniform(0.5, 8, size=k), 500, seed + 10_000)
        cfg = RegularizationConfig(float(rng.choice([0.0, 0.1, 0.3, 0.5])), float(rng.choice([1e-4, 1e-3, 1e-2, 1e-1])))
        fit = fit_dirichlet_regularized(s1, s2, cfg, record=True)
        decreases += int(np.any(np.diff(fit.loss_history) < 0))

    s = _sample_stat((8.0, 1.0, 1.0), 20_000, 3)
    s_bar = _sample_stat((1.0, 4.0, 4.0), 20_000, 4)
    free = fit_dirichlet_regularized(s, s_bar, RegularizationConfig(0.0, 0.0)).alpha
    shrunk = fit_dirichlet_regularized(s, s_bar, RegularizationConfig(0.0, 0.01)).alpha
    n_free, n_shrunk = float(np.sum(free**2)), float(np.sum(shrunk**2))
    ok = a_err <= 1e-6 and decreases == 0 and n_shrunk < n_free
    report(
        3,
        ok,
        f"(a) max |alpha - MLE| {a_err:.1e}; (b) {decreases}/50 problems with a loss decrease; "
        f"(c) sum alpha^2 {n_shrunk:.2f} < {n_free:.2f}",
    )


# -- 4, 5 -------------------------------------------------------------------


def _run_scenario(preset, seed):
    sc = build_scenario(preset, seed, num_classes=6, height=512, width=512)
    calib = calibrate(sc.dev_scores, sc.dev_gt, sc.class_set)
    model, _ = fit_model(calib, RegularizationConfig())
    test = {e: v[0] for e, v in sc.test_scores.items()}
    gt = sc.test_gt[0]
    cs = sc.class_set
    reports = {e: evaluate(np.argmax(y, axis=-1), gt, cs) for e, y in test.items()}
    reports["bayes"] = evaluate(fuse_bayes({e: np.argmax(y, axis=-1) for e, y in test.items()}, model).labels, gt, cs)
    reports["dirichlet"] = evaluate(fuse_dirichlet(test, model).labels, gt, cs)
    reports["average"] = evaluate(fuse_average(test).labels, gt, cs)
    return reports


@pytest.mark.criterion(4, "complementary experts: fusion beats each expert by >= 5 points")
def test_c4_complementary():
    start = time.perf_counter()
    r = _run_scenario("complementary", 41)
    best_single = max(r["A"].mean_iou, r["B"].mean_iou)
    ambiguous = [0, 1, 2, 3]
    dir_amb = float(np.mean(r["dirichlet"].per_class_iou[ambiguous]))
    bay_amb = float(np.mean(r["bayes"].per_class_iou[ambiguous]))
    elapsed = time.perf_counter() - start
    ok = (
        r["bayes"].mean_iou >= best_single + 0.05
        and r["dirichlet"].mean_iou >= best_single + 0.05
        and dir_amb >= bay_amb
        and elapsed < 120
    )
    report(
        4,
        ok,
        f"mIoU A {100 * r['A'].mean_iou:.2f}, B {100 * r['B'].mean_iou:.2f}, bayes {100 * r['bayes'].mean_iou:.2f}, "
        f"dirichlet {100 * r['dirichlet'].mean_iou:.2f}; ambiguous classes dirichlet {100 * dir_amb:.2f} "
        f">= bayes {100 * bay_amb:.2f}; {elapsed:.1f} s",
    )


@pytest.mark.criterion(5, "degraded expert: Bayes follows the good expert, averaging collapses")
def test_c5_degraded():
    r = _run_scenario("degraded", 42)
    good = r["A"].mean_iou
    ok = r["bayes"].mean_iou >= good - 0.005 and r["average"].mean_iou <= good - 0.03
    report(
        5,
        ok,
        f"good expert {100 * good:.2f}, bayes {100 * r['bayes'].mean_iou:.2f}, average {100 * r['average'].mean_iou:.2f}",
    )


# -- 6 ----------------------------------------------------------------------


@pytest.mark.criterion(6, "equal certainties reduce variance fusion to averaging")
def test_c6_variance_reduction():
    rng = np.random.default_rng(6)
    results = []
    for m in (2, 3):
        # dyadic means and deviations keep every variance exact, so the
        # per-element variances coincide across experts
        counts = rng.multinomial(1024, np.ones(5) / 5, size=(m, 10_000))
        d = rng.integers(-8, 9, size=(10_000, 5)) / 16384.0
        stacks = [np.stack([c / 1024.0 + d, c / 1024.0 - d, c / 1024.0]) for c in counts]
        omegas = np.stack([certainty(s)[1] for s in stacks])
        assert np.all(omegas == omegas[0])
        a = fuse_variance(stacks).labels
        b = fuse_average([s.mean(axis=0) for s in stacks]).labels
        results.append(int(np.sum(a != b)))
    report(6, results == [0, 0], f"label mismatches on 10000 elements: M=2 {results[0]}, M=3 {results[1]}")


# -- 7 ----------------------------------------------------------------------


@pytest.mark.criterion(7, "metrics: hand example exact, batch equals concatenation")
def test_c7_metrics():
    cs = ClassSet.generic(2)
    r = evaluate(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), cs)
    hand = (
        r.per_class_iou.tolist() == [0.5, 2 / 3]
        and r.mean_iou == 7 / 12
        and r.mean_precision == 0.75
    )
    rng = np.random.default_rng(7)
    cs5 = ClassSet.generic(5, ignore_index=0)
    preds = [rng.integers(0, 5, size=(13, 11)) for _ in range(4)]
    gts = [rng.integers(0, 5, size=(13, 11)) for _ in range(4)]
    b = evaluate_batch(preds, gts, cs5)
    w = evaluate(np.concatenate(preds), np.concatenate(gts), cs5)
    same = (
        np.array_equal(b.confusion, w.confusion)
        and np.array_equal(b.per_class_iou, w.per_class_iou, equal_nan=True)
        and np.array_equal(b.per_class_precision, w.per_class_precision, equal_nan=True)
        and b.mean_iou == w.mean_iou
        and b.mean_precision == w.mean_precision
    )
    report(7, hand and same, f"IoU {r.per_class_iou.tolist()}, mIoU {r.mean_iou!r}, mean precision {r.mean_precision!r}")


# -- 8 ----------------------------------------------------------------------


@pytest.mark.criterion(8, "throughput: every method < 1 s on 768x384, K=12, two experts")
def test_c8_throughput():
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    proc = subprocess.run(
        [sys.executable, "-m", "statfuse", "bench", "--trials", "5", "--height", "384", "--width", "768",
         "--num-classes", "12", "--experts", "2"],
        capture_output=True,
        text=True,
        env=env,
    )
    rows = re.findall(r"^(\w+)\s+([\d.]+) ms \+- ([\d.]+) ms$", proc.stdout, re.M)
    timings = {m: (float(a), float(s)) for m, a, s in rows}
    ok = proc.returncode == 0 and set(timings) == {"bayes", "dirichlet", "average", "variance"}
    ok = ok and all(mean < 1000.0 and math.isfinite(std) for mean, std in timings.values())
    report(8, ok, ", ".join(f"{m} {a:.0f}+-{s:.0f} ms" for m, (a, s) in timings.items()) or proc.stderr)


# -- 9 ----------------------------------------------------------------------


def _pipeline(root: Path):
    sc = root / "sc"
    steps = [
        ["simulate", "--preset", "sample_stacks", "--out", str(sc), "--seed", "9", "--height", "64", "--width", "64",
         "--samples", "3"],
        ["calibrate", "--manifest", str(sc / "dev.tsv"), "--out", str(root / "model.sf"), "--subsample", "0.5",
         "--seed", "3"],
        ["fit", "--model", str(root / "model.sf"), "--manifest", str(sc / "dev.tsv"), "--beta", "0.1", "--delta",
         "0.001", "--subsample", "0.5", "--seed", "3"],
    ]
    for method in ("bayes", "dirichlet", "average"):
        steps.append(["fuse", "--manifest", str(sc / "test.tsv"), "--method", method, "--model", str(root / "model.sf"),
                      "--out", str(root / method)])
    steps.append(["fuse", "--manifest", str(sc / "test_samples.tsv"), "--method", "variance", "--model",
                  str(root / "model.sf"), "--out", str(root / "variance")])
    ev = ["eval", "--gt", str(sc / "test" / "gt"), "--model", str(root / "model.sf"), "--out", str(root / "eval")]
    for method in ("bayes", "dirichlet", "average", "variance"):
        ev += ["--pred", f"{method}={root / method}"]
    steps.append(ev)
    return [run(s) for s in steps]


@pytest.mark.criterion(9, "end-to-end runs are byte-identical")
def test_c9_reproducibility(tmp_path):
    codes = _pipeline(tmp_path / "one") + _pipeline(tmp_path / "two")
    files_one = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
    files_two = sorted(p.relative_to(tmp_path / "two") for p in (tmp_path / "two").rglob("*") if p.is_file())
    differing = [str(f) for f in files_one if (tmp_path / "one" / f).read_bytes() != (tmp_path / "two" / f).read_bytes()]
    kinds = {"model.sf", "bayes/img000.sft", "variance/img000.sft", "eval/report_dirichlet.tsv"}
    ok = all(c == 0 for c in codes) and files_one == files_two and not differing
    ok = ok and kinds <= {str(f) for f in files_one}
    report(9, ok, f"{len(files_one)} files compared, {len(differing)} differ")


# -- 10 ---------------------------------------------------------------------

# Under-confident experts: half of every expert's outputs are flat draws that
# carry no class information.  The per-class Dirichlet family cannot model
# that mixture, so the likelihood fit is misspecified and the discriminative
# beta term pays off on the dev set.
C10 = dict(sharpness=5.0, flat_prob=0.5, height=128, width=128, region_size=8)
C10_BETAS = (0.0, 0.1, 0.3)
C10_DELTAS = (0.0, 1e-3, 1e-2)


@pytest.mark.criterion(10, "grid search finds the improving nonzero (beta, delta)")
def test_c10_grid_search():
    sc = build_scenario("complementary", 1, **C10)
    calib = calibrate(sc.dev_scores, sc.dev_gt, sc.class_set)
    result = grid_search(sc.dev_scores, sc.dev_gt, sc.class_set, C10_BETAS, C10_DELTAS, calib=calib)
    table = {(p.beta, p.delta): p.mean_iou for p in result.table}
    base = table[(0.0, 0.0)]
    best = result.best.mean_iou
    first_max = next(p for p in result.table if p.mean_iou == max(table.values()))
    rerun_ok = all(
        evaluate_grid_point(calib, sc.dev_scores, sc.dev_gt, p.beta, p.delta).mean_iou == p.mean_iou
        for p in result.table
    )
    # the improvement is systematic, not a lucky seed: beta = 0.3 beats the
    # plain likelihood fit on independent scenarios too
    others = []
    for seed in (2, 3):
        other = build_scenario("complementary", seed, **C10)
        oc = calibrate(other.dev_scores, other.dev_gt, other.class_set)
        gain = (
            evaluate_grid_point(oc, other.dev_scores, other.dev_gt, 0.3, 1e-3).mean_iou
            - evaluate_grid_point(oc, other.dev_scores, other.dev_gt, 0.0, 0.0).mean_iou
        )
        others.append(gain)
    ok = (
        (result.beta, result.delta) != (0.0, 0.0)
        and best > base
        and (first_max.beta, first_max.delta) == (result.beta, result.delta)
        and rerun_ok
        and all(g > 0 for g in others)
    )
    report(
        10,
        ok,
        f"best (beta, delta) = ({result.beta:g}, {result.delta:g}) dev mIoU {100 * best:.2f} vs {100 * base:.2f} at (0, 0); "
        f"single-point reruns identical: {rerun_ok}; beta=0.3 gains on seeds 2, 3: "
        + ", ".join(f"{100 * g:+.2f}" for g in others),
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
