"""Command-line entry point: ``statfuse <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, unmet method requirements),
2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from statfuse import io
from statfuse.calibration import (
    DEFAULT_BETA_GRID,
    DEFAULT_DELTA_GRID,
    RegularizationConfig,
    calibrate,
    fit_model,
    grid_search,
    Calibration,
)
from statfuse.core import DEFAULT_SMOOTHING, ClassSet, ExpertModel, FusionModel, ClassPrior
from statfuse.errors import StatfuseError
from statfuse.fusion import METHODS, fuse
from statfuse.metrics import bench_inference, evaluate_batch, format_table
from statfuse.synth import PRESETS, build_scenario, sharp_alphas, simulate_expert, simulate_samples, ExpertSpec

log = logging.getLogger("statfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# helpers


def _class_set(args, num_classes: int | None = None) -> ClassSet:
    ignore = getattr(args, "ignore_index", None)
    if getattr(args, "class_names", None):
        names = [n.strip() for n in Path(args.class_names).read_text().splitlines() if n.strip()]
        return ClassSet(tuple(names), ignore)
    k = getattr(args, "num_classes", None) or num_classes
    if k is None:
        raise UsageError("cannot determine the class count; pass --class-names or --num-classes")
    return ClassSet.generic(k, ignore)


def _load_split(manifest: io.Manifest):
    names = manifest.basenames()
    if not names:
        raise StatfuseError(f"{manifest.gt}: no ground-truth tensors")
    gts = [io.read_tensor(manifest.gt / n) for n in names]
    scores = {eid: [io.read_tensor(d / n) for n in names] for eid, d in manifest.experts.items()}
    return names, gts, scores


def _calibrate_from_manifest(args, manifest_path, model: FusionModel | None = None) -> Calibration:
    manifest = io.read_manifest(manifest_path)
    _, gts, scores = _load_split(manifest)
    k = next(iter(scores.values()))[0].shape[-1]
    class_set = model.class_set if model is not None else _class_set(args, k)
    smoothing = model.smoothing if model is not None else args.smoothing
    calib = calibrate(scores, gts, class_set, smoothing=smoothing, subsample=args.subsample, seed=args.seed)
    if model is not None:
        missing = set(model.experts) ^ set(calib.model.experts)
        if missing:
            raise StatfuseError(f"manifest and model disagree on experts: {', '.join(sorted(missing))}")
        calib = Calibration(model, calib.stats)
    return calib


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    out = Path(args.out)
    scenario = build_scenario(
        args.preset,
        args.seed,
        num_classes=args.num_classes,
        height=args.height,
        width=args.width,
        region_size=args.region,
        dev_images=args.dev_images,
        test_images=args.test_images,
        sharpness=args.sharpness,
        samples=args.samples,
        flat_prob=args.flat_prob,
    )
    for split, gts, scores in (
        ("dev", scenario.dev_gt, scenario.dev_scores),
        ("test", scenario.test_gt, scenario.test_scores),
    ):
        (out / split / "gt").mkdir(parents=True, exist_ok=True)
        for i, g in enumerate(gts):
            io.write_tensor(out / split / "gt" / f"img{i:03d}.sft", g)
        for eid, maps in scores.items():
            (out / split / eid).mkdir(parents=True, exist_ok=True)
            for i, y in enumerate(maps):
                io.write_tensor(out / split / eid / f"img{i:03d}.sft", y)
        io.write_manifest(out / f"{split}.tsv", {eid: f"{split}/{eid}" for eid in scores}, f"{split}/gt")
    if scenario.test_samples:
        for eid, stacks in scenario.test_samples.items():
            d = out / "test" / f"{eid}_samples"
            d.mkdir(parents=True, exist_ok=True)
            for i, st in enumerate(stacks):
                io.write_tensor(d / f"img{i:03d}.sft", st)
        io.write_manifest(
            out / "test_samples.tsv", {eid: f"test/{eid}_samples" for eid in scenario.test_samples}, "test/gt"
        )
    (out / "classes.txt").write_text("\n".join(scenario.class_set.names) + "\n")
    spec = {
        "preset": args.preset,
        "seed": args.seed,
        "experts": [
            {
                "id": e.id,
                "generative_alphas": e.generative_alphas.tolist(),
                "flat_prob": e.flat_prob,
                "flat_concentration": e.flat_concentration,
                "sample_concentration": scenario.sample_concentration.get(e.id),
            }
            for e in scenario.experts
        ],
    }
    (out / "experts.json").write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.preset} scenario to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    calib = _calibrate_from_manifest(args, args.manifest)
    io.save_model(args.out, calib.model)
    counts = next(iter(calib.model.experts.values())).confusion.sum()
    print(f"calibrated {len(calib.model.experts)} experts on {counts} elements -> {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    model = io.load_model(args.model)
    calib = _calibrate_from_manifest(args, args.manifest, model)
    cfg = RegularizationConfig(args.beta, args.delta, args.max_iter)
    fitted, fits = fit_model(calib, cfg)
    out = args.out or args.model
    io.save_model(out, fitted)
    for eid, f in fits.items():
        notes = []
        if f.fallbacks:
            notes.append(f"MLE fallback for classes {list(f.fallbacks)}")
        if not np.all(f.converged):
            notes.append(f"hit iteration cap for classes {np.flatnonzero(~f.converged).tolist()}")
        print(f"expert {eid}: fitted" + (f" ({'; '.join(notes)})" if notes else ""))
    print(f"beta={args.beta:g} delta={args.delta:g} -> {out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = None
    if args.method != "average":
        if not args.model:
            raise UsageError(f"--method {args.method} requires --model (only 'average' runs uncalibrated)")
        model = io.load_model(args.model)
        if args.method == "dirichlet" and not model.has_dirichlet:
            missing = [eid for eid, em in model.experts.items() if em.dirichlet is None]
            raise UsageError(
                f"{args.model}: 'dirichlet' section missing for expert(s) {', '.join(missing)}; run 'statfuse fit' first"
            )
    manifest = io.read_manifest(args.manifest)
    if model is not None and args.method != "variance":
        unknown = set(manifest.experts) - set(model.experts)
        if unknown:
            raise UsageError(f"{args.model}: no calibration for expert(s) {', '.join(sorted(unknown))}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = manifest.basenames()
    for name in names:
        inputs = {eid: io.read_tensor(d / name) for eid, d in manifest.experts.items()}
        if args.method == "variance":
            if any(a.ndim != 4 for a in inputs.values()):
                raise StatfuseError(f"{name}: variance fusion needs rank-4 sample stacks")
        elif any(a.ndim != 3 for a in inputs.values()):
            raise StatfuseError(f"{name}: {args.method} fusion needs rank-3 score maps")
        if model is not None and any(a.shape[-1] != model.num_classes for a in inputs.values()):
            raise StatfuseError(f"{name}: class count differs from the model's {model.num_classes}")
        result = fuse(args.method, inputs, model)
        io.write_tensor(out / name, result.labels.astype(np.uint16))
    print(f"fused {len(names)} images with {args.method} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.model:
        class_set = io.load_model(args.model).class_set
        if args.ignore_index is not None:
            class_set = ClassSet(class_set.names, args.ignore_index)
    else:
        class_set = _class_set(args)
    gt_dir = Path(args.gt)
    names = sorted(p.name for p in gt_dir.glob(f"*{io.TENSOR_SUFFIX}"))
    if not names:
        raise StatfuseError(f"{gt_dir}: no ground-truth tensors")
    gts = [io.read_tensor(gt_dir / n) for n in names]
    reports = {}
    for spec in args.pred:
        label, _, d = spec.rpartition("=")
        d = Path(d)
        label = label or d.name
        if label in reports:
            raise UsageError(f"duplicate prediction label {label!r}")
        preds = []
        for n in names:
            if not (d / n).is_file():
                raise StatfuseError(f"{d}: missing prediction {n}")
            pred = io.read_tensor(d / n)
            preds.append(np.argmax(pred, axis=-1) if pred.ndim == 3 else pred)  # raw expert scores
        reports[label] = evaluate_batch(preds, gts, class_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for label, rep in reports.items():
        (out / f"report_{label}.tsv").write_text("\n".join(rep.lines()) + "\n")
    table = "IoU [%]\n" + format_table(reports, "iou") + "\n\nprecision [%]\n" + format_table(reports, "precision")
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_grid_search(args) -> int:
    manifest = io.read_manifest(args.manifest)
    _, gts, scores = _load_split(manifest)
    model = io.load_model(args.model) if args.model else None
    k = next(iter(scores.values()))[0].shape[-1]
    class_set = model.class_set if model else _class_set(args, k)
    calib = calibrate(
        scores,
        gts,
        class_set,
        smoothing=model.smoothing if model else args.smoothing,
        subsample=args.subsample,
        seed=args.seed,
    )
    result = grid_search(scores, gts, class_set, args.betas, args.deltas, calib=calib, max_iterations=args.max_iter)
    lines = ["beta\tdelta\tmean_iou\tfallbacks"]
    lines += [f"{p.beta:.17g}\t{p.delta:.17g}\t{p.mean_iou:.17g}\t{p.fallbacks}" for p in result.table]
    lines.append(f"best\t{result.beta:.17g}\t{result.delta:.17g}\t{result.best.mean_iou:.17g}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"best beta={result.beta:g} delta={result.delta:g} dev mIoU={100 * result.best.mean_iou:.2f}")
    if args.write_model:
        fitted, _ = fit_model(calib, RegularizationConfig(result.beta, result.delta, args.max_iter))
        io.save_model(args.write_model, fitted)
    return EXIT_OK


def _bench_inputs(args):
    k, h, w = args.num_classes, args.height, args.width
    rng = np.random.default_rng(args.seed)
    gt = rng.integers(0, k, size=(h, w))
    ids = [f"e{i}" for i in range(args.experts)]
    specs = [ExpertSpec(eid, sharp_alphas(k, 4.0)) for eid in ids]
    scores = {s.id: simulate_expert(gt, s, (args.seed, i)) for i, s in enumerate(specs)}
    stacks = {s.id: simulate_samples(gt, s, (args.seed, 100 + i), args.samples, 30.0) for i, s in enumerate(specs)}
    experts = {eid: ExpertModel(np.eye(k, dtype=np.int64) * 90 + 1, sharp_alphas(k, 4.0)) for eid in ids}
    model = FusionModel(ClassSet.generic(k), experts, ClassPrior.uniform(k))
    labels = {eid: np.argmax(y, axis=-1) for eid, y in scores.items()}
    return scores, labels, stacks, model


def cmd_bench(args) -> int:
    methods = list(METHODS) if args.method == "all" else args.method.split(",")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    scores, labels, stacks, model = _bench_inputs(args)
    print(f"{args.height}x{args.width}, K={args.num_classes}, {args.experts} experts, {args.trials} trials")
    for m in methods:
        inputs = {"variance": stacks, "bayes": labels}.get(m, scores)
        mean, std = bench_inference(m, inputs, args.trials, model)
        print(f"{m:<10s} {mean:10.2f} ms +- {std:.2f} ms")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="statfuse", description="Statistical fusion of semantic segmentation experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def classes(sp):
        sp.add_argument("--class-names", help="text file with one class name per line")
        sp.add_argument("--num-classes", type=int, help="class count when no names file is given")
        sp.add_argument("--ignore-index", type=int, default=None, help="class excluded from calibration and metrics")

    def calib_opts(sp):
        sp.add_argument("--subsample", type=float, default=None, help="fraction of elements used for Dirichlet statistics")
        sp.add_argument("--seed", type=int, default=0, help="seed for --subsample")

    sp = sub.add_parser("simulate", help="write a synthetic dev/test scenario")
    sp.add_argument("--preset", choices=PRESETS, required=True, help="scenario preset")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, required=True, help="seed for all random draws")
    sp.add_argument("--num-classes", type=int, default=6, help="number of classes (default 6)")
    sp.add_argument("--height", type=int, default=512, help="image height (default 512)")
    sp.add_argument("--width", type=int, default=512, help="image width (default 512)")
    sp.add_argument("--region", type=int, default=16, help="side of square label regions (default 16)")
    sp.add_argument("--dev-images", type=int, default=1, help="development images (default 1)")
    sp.add_argument("--test-images", type=int, default=1, help="test images (default 1)")
    sp.add_argument("--sharpness", type=float, default=6.0, help="extra concentration on the true class (default 6)")
    sp.add_argument("--samples", type=int, default=0, help="Monte-Carlo samples per test element (0 = none)")
    sp.add_argument("--flat-prob", type=float, default=0.0, help="chance an element's scores are replaced by a flat draw")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="build confusion matrices and the class prior from a dev manifest")
    sp.add_argument("--manifest", required=True, help="dev-set manifest")
    sp.add_argument("--out", required=True, help="model file to write")
    sp.add_argument("--smoothing", type=float, default=DEFAULT_SMOOTHING, help="add-count per confusion cell at fusion time")
    classes(sp)
    calib_opts(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("fit", help="add Dirichlet parameters to a calibrated model")
    sp.add_argument("--model", required=True, help="calibrated model file")
    sp.add_argument("--manifest", required=True, help="dev-set manifest the model was calibrated on")
    sp.add_argument("--beta", type=float, default=0.0, help="discrimination weight in [0, 1)")
    sp.add_argument("--delta", type=float, default=0.0, help="squared-norm penalty >= 0")
    sp.add_argument("--max-iter", type=int, default=1000, help="iteration cap (default 1000)")
    sp.add_argument("--out", help="output model file (default: overwrite --model)")
    calib_opts(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("fuse", help="fuse expert outputs listed in a manifest")
    sp.add_argument("--manifest", required=True, help="manifest of expert outputs to fuse")
    sp.add_argument("--method", choices=METHODS, required=True, help="fusion method")
    sp.add_argument("--model", help="model file (required for every method except average)")
    sp.add_argument("--out", required=True, help="directory for fused label tensors")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("eval", help="evaluate label tensors against ground truth")
    sp.add_argument("--gt", required=True, help="ground-truth label directory")
    sp.add_argument("--pred", action="append", required=True, help="[NAME=]DIR of predictions; repeatable")
    sp.add_argument("--out", required=True, help="directory for report_<NAME>.tsv and table.txt")
    sp.add_argument("--model", help="take class names and ignore index from this model")
    classes(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grid-search", help="choose beta/delta by dev-set Dirichlet fusion mIoU")
    sp.add_argument("--manifest", required=True, help="dev-set manifest")
    sp.add_argument("--model", help="calibrated model supplying class names and smoothing")
    sp.add_argument("--betas", type=_float_list, default=list(DEFAULT_BETA_GRID), help="comma-separated beta grid")
    sp.add_argument("--deltas", type=_float_list, default=list(DEFAULT_DELTA_GRID), help="comma-separated delta grid")
    sp.add_argument("--max-iter", type=int, default=1000, help="iteration cap per fit (default 1000)")
    sp.add_argument("--out", required=True, help="table file to write")
    sp.add_argument("--write-model", help="also write a model fitted at the best pair")
    sp.add_argument("--smoothing", type=float, default=DEFAULT_SMOOTHING, help="confusion smoothing when no --model")
    classes(sp)
    calib_opts(sp)
    sp.set_defaults(func=cmd_grid_search)

    sp = sub.add_parser("bench", help="time fusion methods on constant synthetic input")
    sp.add_argument("--method", default="all", help="'all' or comma-separated methods")
    sp.add_argument("--trials", type=int, default=100, help="repetitions per method (default 100)")
    sp.add_argument("--height", type=int, default=384, help="image height (default 384)")
    sp.add_argument("--width", type=int, default=768, help="image width (default 768)")
    sp.add_argument("--num-classes", type=int, default=12, help="classes (default 12)")
    sp.add_argument("--experts", type=int, default=2, help="number of experts (default 2)")
    sp.add_argument("--samples", type=int, default=4, help="Monte-Carlo samples for variance fusion (default 4)")
    sp.add_argument("--seed", type=int, default=0, help="seed for the synthetic input")
    sp.set_defaults(func=cmd_bench)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StatfuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
