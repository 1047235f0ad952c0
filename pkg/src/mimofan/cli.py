"""Command-line entry point: ``mimofan <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error, 3 failed
verification.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, gradcheck, kernels
from .metrics import ClassWeights, EvalReport
from .network import ARCHS, ConfigurationError, NetworkConfig, predict_mask, predict_proba
from .tensor import ContractError, DimensionError, Tensor
from .training import (
    TrainingError,
    TrainRunConfig,
    fit,
    kfold_split,
    load_model,
    predict_masks,
    run_ablation,
    run_cv,
    save_model,
    train_fold,
    write_loss_log,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("mimofan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad input; route it to our usage code
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_network(p, toggles=True):
    p.add_argument("--manifest", required=True, help="dataset manifest CSV (case_id,image,mask)")
    p.add_argument("--out", required=True, help="output directory")
    if toggles:
        p.add_argument("--arch", choices=ARCHS, default="mimofan", help="network family; the toggles below apply to mimofan only")
        p.add_argument("--dcc", action=argparse.BooleanOptionalAction, default=True, help="dense cross-scale connections")
        p.add_argument("--dps", action=argparse.BooleanOptionalAction, default=True, help="deep pyramid supervision")
        p.add_argument("--sf", action=argparse.BooleanOptionalAction, default=True, help="scale fusing at inference")
    p.add_argument("--filters", type=_positive, default=16, help="base filter count F")
    p.add_argument("--scales", type=_positive, default=5, help="pyramid scales S")
    p.add_argument("--epochs", type=int, default=50, help="passes over the training cases")
    p.add_argument("--batch-size", type=int, default=4, help="cases per Adam step")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0, help="seed for init, folds and batch order")
    p.add_argument("--w-bg", type=float, default=ClassWeights.background, help="background class weight")
    p.add_argument("--w-fg", type=float, default=ClassWeights.foreground, help="foreground class weight")


def build_parser() -> argparse.ArgumentParser:
    fmt = _Help
    parser = _Parser(prog="mimofan", description="Multi-scale segmentation network: training, evaluation and verification.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset", formatter_class=fmt)
    p.add_argument("--cases", type=_positive, default=50, help="number of cases")
    p.add_argument("--size", type=_positive, default=64, help="image side in pixels (multiple of 16)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train one model (one fold with --fold)", formatter_class=fmt)
    _add_network(p)
    p.add_argument("--folds", type=_positive, default=5, help="fold count used with --fold")
    p.add_argument("--fold", type=int, default=None, help="train on the other folds and evaluate on this one")

    p = sub.add_parser("cv", help="k-fold training plus majority-vote ensemble", formatter_class=fmt)
    _add_network(p)
    p.add_argument("--folds", type=_positive, default=5, help="cross-validation folds")
    p.add_argument("--jobs", type=_positive, default=1, help="parallel fold jobs")
    p.add_argument("--test-manifest", default=None, help="held-out set for the ensemble")

    p = sub.add_parser("ablate", help="train every ablation row across all folds", formatter_class=fmt)
    _add_network(p, toggles=False)
    p.add_argument("--folds", type=_positive, default=5, help="cross-validation folds")
    p.add_argument("--jobs", type=_positive, default=1, help="parallel training jobs")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model file (.mfan)")
    p.add_argument("--manifest", required=True, help="cases to score")
    p.add_argument("--out", default=None, help="report CSV (stdout if omitted)")
    p.add_argument("--fold", type=int, default=-1, help="fold id written into the report")

    p = sub.add_parser("predict", help="segment one PGM image", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model file (.mfan)")
    p.add_argument("--image", required=True, help="input PGM")
    p.add_argument("--out", required=True, help="output mask PGM")
    p.add_argument("--overlay", default=None, help="optional PPM overlay (needs --truth)")
    p.add_argument("--truth", default=None, help="ground-truth mask PGM for the overlay")

    p = sub.add_parser("gradcheck", help="finite-difference verification suite", formatter_class=fmt)
    p.add_argument("--op", action="append", default=None, choices=[*gradcheck.PRIMITIVES, "network"], help="check only this op (repeatable)")
    p.add_argument("--seeds", type=_positive, default=20, help="random seeds per check")
    return parser


def _network_config(args, **overrides) -> NetworkConfig:
    fields = dict(scales=args.scales, filters=args.filters)
    if hasattr(args, "arch"):
        fields.update(arch=args.arch, dcc=args.dcc, dps=args.dps, sf=args.sf)
    fields.update(overrides)
    return NetworkConfig(**fields)


def _run_config(args) -> TrainRunConfig:
    if args.epochs < 1:
        raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
    if args.batch_size < 1:
        raise UsageError(f"--batch-size must be >= 1, got {args.batch_size}")
    try:
        network = _network_config(args)
        weights = ClassWeights(args.w_bg, args.w_fg)
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return TrainRunConfig(args.manifest, args.out, network, weights, args.epochs, args.batch_size, args.seed, args.lr)


def _print_config(command: str, config: dict) -> None:
    print(f"{command} config: " + json.dumps(config, sort_keys=True, default=str), flush=True)


def cmd_synth(args) -> int:
    _print_config("synth", dict(cases=args.cases, size=args.size, seed=args.seed, out=args.out))
    manifest = dataio.synth_dataset(args.cases, args.size, args.seed, args.out)
    print(f"wrote {len(manifest)} cases to {manifest.path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _run_config(args)
    _print_config("train", dict(config.to_dict(), fold=args.fold, folds=args.folds, backend=kernels.backend_name()))
    if args.fold is not None:
        if not 0 <= args.fold < args.folds:
            raise UsageError(f"--fold must be in [0, {args.folds}), got {args.fold}")
        manifest = dataio.load_manifest(config.manifest, divisor=config.network.divisor)
        plan = kfold_split(manifest.case_ids, args.folds, config.seed)
        result = train_fold(config, plan, args.fold, data=(manifest, *dataio.load_cases(manifest)))
        print(f"fold {args.fold}: average dice {result.report.average_dice:.4f}, global dice {result.report.global_dice:.4f}, checkpoint {result.checkpoint}")
        return EXIT_OK
    manifest = dataio.load_manifest(config.manifest, divisor=config.network.divisor)
    images, masks = dataio.load_cases(manifest)
    from .network import build

    model = build(config.network, config.seed)
    result = fit(model, images, masks, config.epochs, config.batch_size, config.seed, config.weights, config.lr)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_loss_log(result.losses, out / "loss.csv")
    save_model(result.model, out / "final.mfan")
    print(f"final loss {result.losses[-1][2]:.5f}, checkpoint {out / 'final.mfan'}")
    return EXIT_OK


def cmd_cv(args) -> int:
    config = _run_config(args)
    _print_config("cv", dict(config.to_dict(), folds=args.folds, jobs=args.jobs, test_manifest=args.test_manifest, backend=kernels.backend_name()))
    result = run_cv(config, args.folds, args.jobs, args.test_manifest)
    for f in result.folds:
        print(f"fold {f.fold}: {len(f.report.case_ids)} cases, average dice {f.report.average_dice:.4f} (best epoch {f.best_epoch}, {f.seconds:.1f}s)")
    if result.ensemble is not None:
        print(f"ensemble: average dice {result.ensemble.average_dice:.4f}, global dice {result.ensemble.global_dice:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _run_config(args)
    _print_config("ablate", dict(config.to_dict(), folds=args.folds, jobs=args.jobs, backend=kernels.backend_name()))
    result = run_ablation(config, args.folds, args.jobs)
    for row in result.table():
        print(f"{row[0]:<24} " + " ".join(f"{100 * v:6.2f}" for v in row[1:-2]) + f"   {100 * row[-2]:.2f} +/- {100 * row[-1]:.2f}")
    for label, t, p2, p1, df in result.ttests:
        print(f"full vs {label}: t={t:.3f} p(two-sided)={p2:.4g} p(greater)={p1:.4g} df={df}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config("eval", dict(checkpoint=args.checkpoint, manifest=args.manifest, out=args.out, fold=args.fold))
    model = load_model(args.checkpoint)
    manifest = dataio.load_manifest(args.manifest, divisor=model.config.divisor)
    images, masks = dataio.load_cases(manifest)
    pred, _ = predict_masks(model, images)
    report = EvalReport.from_cases(args.fold, manifest.case_ids, list(pred), list(masks))
    if args.out:
        report.write_csv(args.out)
        print(f"average dice {report.average_dice:.4f}, global dice {report.global_dice:.4f}")
    else:
        report.write_csv(sys.stdout)
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.overlay and not args.truth:
        raise UsageError("--overlay needs --truth")
    _print_config("predict", dict(checkpoint=args.checkpoint, image=args.image, out=args.out, overlay=args.overlay, truth=args.truth))
    model = load_model(args.checkpoint)
    image = dataio.read_pgm(args.image, dtype=model.dtype)
    h, w = image.shape[2:]
    if h % model.config.divisor or w % model.config.divisor:
        raise DimensionError(f"{args.image}: size {h}x{w} is not divisible by {model.config.divisor}")
    mask = predict_mask(predict_proba(model, image))
    dataio.write_pgm(mask.data[0, 0] * 255, args.out)
    if args.overlay:
        truth = dataio.read_pgm(args.truth, mask=True)
        if truth.shape != mask.shape:
            raise DimensionError(f"{args.truth}: shape {truth.shape[2:]} differs from image {mask.shape[2:]}")
        dataio.render_overlay(image.data[0, 0], mask.data[0, 0], truth.data[0, 0], args.overlay)
    print(f"foreground fraction {float(np.mean(mask.data)):.4f}, mask written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", dict(ops=args.op or "all", seeds=args.seeds, fd_eps=gradcheck.FD_EPS))
    results = gradcheck.run_suite(args.op, args.seeds)
    by_name: dict[str, list] = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    for name, rs in by_name.items():
        worst = max(r.max_rel_error for r in rs)
        ok = sum(r.passed for r in rs)
        print(f"{'PASS' if ok == len(rs) else 'FAIL'} {name:<20} {ok}/{len(rs)} seeds  max rel err {worst:.2e} (tol {rs[0].tolerance:g})")
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    return EXIT_OK if passed == len(results) else EXIT_VERIFY


COMMANDS = dict(
    synth=cmd_synth, train=cmd_train, cv=cmd_cv, ablate=cmd_ablate, eval=cmd_eval, predict=cmd_predict, gradcheck=cmd_gradcheck
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mimofan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, dataio.ParseError, DimensionError, ConfigurationError, ContractError, TrainingError, ValueError, KeyError) as exc:
        print(f"mimofan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
