"""Command-line entry point: ``padnet <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numeric failure.
Every command first prints its effective configuration as one JSON line.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import data_io
from .autoencoder import Autoencoder
from .errors import DegenerateInputError, DimensionError, FormatError, NumericError, UsageError
from .pipeline import (
    PROFILES,
    TrainConfig,
    evaluate,
    load_model,
    predict_quality,
    pretrain_autoencoder,
    pretrain_regressor_2d,
    train_joint,
)
from .regressor import BACKBONES, Regressor
from .tensor_core import no_grad

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", type=int, choices=sorted(PROFILES), default=256)
    p.add_argument("--backbone", choices=sorted(BACKBONES), default="resnet18")


def _strides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stride-w", type=int, default=None, help="default 192 (256 profile) or 48 (64 profile)")
    p.add_argument("--stride-h", type=int, default=None, help="default 104 (256 profile) or 26 (64 profile)")


def _training(p: argparse.ArgumentParser, stage: int) -> None:
    _common(p)
    _strides(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--decay-every", type=int, default=50)
    p.add_argument("--schedule-scale", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-crop", dest="crop", action="store_false")
    p.add_argument("--no-hflip", dest="hflip", action="store_false")
    p.add_argument("--no-vflip", dest="vflip", action="store_false")
    p.add_argument("--trace", default=None, help="JSON-lines training trace")
    if stage in (1, 2):
        p.add_argument("--lr", type=float, default=1e-4)
    else:
        p.add_argument("--lr-w1", type=float, default=1e-5)
        p.add_argument("--lr-w3", type=float, default=1e-3)
        p.add_argument("--joint-freeze-after", type=int, default=200)
        p.add_argument("--val-fraction", type=float, default=0.0)
        p.add_argument("--ae-weights")
        p.add_argument("--reg-weights")
        p.add_argument("--from-scratch", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="padnet", description="Blind stereo image quality: training and inference.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _training(sub.add_parser("pretrain-ae", help="stage 1: auto-encoder on single views"), 1)
    _training(sub.add_parser("pretrain-2d", help="stage 2: regressor on scored 2d images"), 2)
    _training(sub.add_parser("train-joint", help="stage 3: end-to-end on stereo pairs"), 3)

    p = sub.add_parser("predict", help="score one stereo pair")
    _common(p)
    _strides(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)

    p = sub.add_parser("evaluate", help="SROCC/PLCC/RMSE over a manifest")
    _common(p)
    _strides(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--krasula", action="store_true", help="add AUC-DS/AUC-BW/CC when observers exist")
    p.add_argument("--dmos", action="store_true", help="scores are DMOS (lower is better)")

    p = sub.add_parser("export-maps", help="write the rivalry maps of a stereo pair as PGM")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("unit", "minmax"), default="unit")

    p = sub.add_parser("synth-data", help="synthetic blur/noise stereo dataset with pseudo-MOS labels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--refs", default=None, help="folder of <name>_l / <name>_r reference images")
    p.add_argument("--num-refs", type=int, default=2, help="generated references when --refs is absent")
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--observers", type=int, default=0, help="simulated ratings per stimulus")
    return parser


def _echo(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True, default=str))


def _config(args, stage: int) -> TrainConfig:
    keys = ("epochs", "batch_size", "decay_every", "schedule_scale", "seed", "profile", "stride_w",
            "stride_h", "crop", "hflip", "vflip", "backbone", "max_steps", "lr", "lr_w1", "lr_w3",
            "joint_freeze_after", "val_fraction")
    kwargs = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    return TrainConfig(stage=stage, trace_path=getattr(args, "trace", None), **kwargs)


def _strip(weights: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}


def _views(records) -> List[np.ndarray]:
    images = []
    for r in records:
        images.append(data_io.load_image(r.left_path))
        if r.right_path is not None:
            images.append(data_io.load_image(r.right_path))
    return images


def _cmd_pretrain_ae(args) -> int:
    config = _config(args, 1)
    _echo(args.command, config.as_dict())
    records = data_io.load_manifest(args.manifest)
    result = pretrain_autoencoder(_views(records), config)
    data_io.save_weights(result.model.state_dict(), args.out)
    print(f"steps: {len(result.trace.records)}")
    print(f"loss: {result.trace.losses[0]:.6g} -> {result.trace.losses[-1]:.6g}")
    return EXIT_OK


def _cmd_pretrain_2d(args) -> int:
    config = _config(args, 2)
    _echo(args.command, config.as_dict())
    dataset = data_io.load_images_2d(data_io.load_manifest(args.manifest))
    result = pretrain_regressor_2d(dataset, config)
    data_io.save_weights(result.model.state_dict("reg."), args.out)
    print(f"steps: {len(result.trace.records)}")
    print(f"loss: {result.trace.losses[0]:.6g} -> {result.trace.losses[-1]:.6g}")
    return EXIT_OK


def _cmd_train_joint(args) -> int:
    config = _config(args, 3)
    _echo(args.command, dict(config.as_dict(), ae_weights=args.ae_weights,
                             reg_weights=args.reg_weights, from_scratch=args.from_scratch))
    ae = reg = None
    if args.ae_weights:
        ae = Autoencoder(np.random.default_rng(config.seed))
        ae.load_state_dict(data_io.load_weights(args.ae_weights, prefix="enc.") |
                           data_io.load_weights(args.ae_weights, prefix="dec."), strict=True)
    if args.reg_weights:
        reg = Regressor(np.random.default_rng(config.seed), config.backbone)
        reg.load_state_dict(_strip(data_io.load_weights(args.reg_weights, prefix="reg."), "reg."), strict=True)
    samples = data_io.load_samples(data_io.load_manifest(args.manifest))
    result = train_joint(samples, config, ae, reg, from_scratch=args.from_scratch)
    data_io.save_weights(result.model.state_dict(), args.out)
    print(f"steps: {len(result.trace.records)}")
    print(f"loss: {result.trace.losses[0]:.6g} -> {result.trace.losses[-1]:.6g}")
    if result.test_indices:
        report, _ = evaluate([samples[i] for i in result.test_indices], result.model, config)
        print("held-out:")
        print(report.to_text())
    return EXIT_OK


def _inference_config(args) -> TrainConfig:
    return TrainConfig(profile=args.profile, stride_w=getattr(args, "stride_w", None),
                       stride_h=getattr(args, "stride_h", None), seed=args.seed, backbone=args.backbone)


def _cmd_predict(args) -> int:
    config = _inference_config(args)
    _echo(args.command, dict(config.as_dict(), weights=args.weights, left=args.left, right=args.right))
    model = load_model(data_io.load_weights(args.weights), config.backbone)
    sample = data_io.StereoSample(data_io.load_image(args.left), data_io.load_image(args.right), float("nan"))
    print(repr(predict_quality(sample, model, config=config)))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    config = _inference_config(args)
    _echo(args.command, dict(config.as_dict(), weights=args.weights, manifest=args.manifest,
                             krasula=args.krasula, dmos=args.dmos))
    model = load_model(data_io.load_weights(args.weights), config.backbone)
    samples = data_io.load_samples(data_io.load_manifest(args.manifest))
    report, _ = evaluate(samples, model, config, krasula=args.krasula, higher_is_better=not args.dmos)
    print(report.to_text())
    return EXIT_OK


def _cmd_export_maps(args) -> int:
    _echo(args.command, {"weights": args.weights, "left": args.left, "right": args.right,
                         "out_dir": args.out_dir, "mode": args.mode, "backbone": args.backbone})
    model = load_model(data_io.load_weights(args.weights), args.backbone)
    left, right = data_io.load_image(args.left), data_io.load_image(args.right)
    if left.shape != right.shape:
        raise UsageError(f"views differ in shape: {left.shape} vs {right.shape}")
    # The auto-encoder needs multiples of 16; maps cover the top-left such region.
    h, w = (d - d % 16 for d in left.shape[-2:])
    if h == 0 or w == 0:
        raise UsageError("images must be at least 16x16")
    with no_grad():
        bundle = model.rivalry(left[:, :h, :w], right[:, :h, :w])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, value in bundle.maps().items():
        path = out / f"{name}.pgm"
        data_io.export_map(value.data[0], path, args.mode)
        print(path)
    return EXIT_OK


def _cmd_synth_data(args) -> int:
    _echo(args.command, {"seed": args.seed, "out": args.out, "refs": args.refs, "num_refs": args.num_refs,
                         "size": list(args.size), "observers": args.observers})
    rng = np.random.default_rng(args.seed)
    if args.refs:
        refs = [(data_io.load_image(l), data_io.load_image(r)) for l, r in data_io.find_reference_pairs(args.refs)]
    else:
        if args.num_refs < 1:
            raise UsageError("--num-refs must be positive")
        refs = [data_io.synthetic_stereo_pair(*args.size, rng) for _ in range(args.num_refs)]
    samples = data_io.synthesize_distortions(refs, rng)
    if args.observers:
        if args.observers < 2:
            raise UsageError("--observers needs at least 2 ratings")
        for s in samples:
            s.observers = list(np.round(s.score + rng.normal(0.0, 5.0, args.observers), 2))
    manifest = data_io.write_dataset(samples, args.out)
    # Single views with their own level's label feed the 2d pretraining stage.
    out = Path(args.out)
    records = data_io.load_manifest(manifest)
    for i, (left, _) in enumerate(refs):
        for kind in ("blur", "noise"):
            for level in range(data_io.MAX_LEVEL + 1):
                path = out / f"2d_{i:03d}_{kind}_{level}.ppm"
                data_io.save_image(data_io.distort(left, kind, level, rng), path)
                records.append(data_io.ManifestRecord(path, None, data_io.pseudo_mos(level, level),
                                                      "2d", kind, str(level)))
    data_io.write_manifest(records, manifest)
    print(manifest)
    print(f"records: {len(records)}")
    return EXIT_OK


COMMANDS = {
    "pretrain-ae": _cmd_pretrain_ae,
    "pretrain-2d": _cmd_pretrain_2d,
    "train-joint": _cmd_train_joint,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "export-maps": _cmd_export_maps,
    "synth-data": _cmd_synth_data,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, DimensionError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, DegenerateInputError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
