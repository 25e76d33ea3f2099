"""Command-line entry points for data generation, training, and evaluation.

Every command exits 0 on success; failures print one machine-parseable line
``error: category=<category> message="..."`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import RunConfig, ird_defaults, idpnet_defaults, load_config
from .errors import (CheckpointError, ConfigError, ImplantDepthError,
                     ShapeError, TrainingDiverged, VolumeFormatError)
from .metrics import evaluate, texture_variation_curve, write_report
from .phantom import PhantomConfig, dataset_split, generate_phantom
from .volume_io import read_volume, write_volume

_CATEGORIES = (
    (ConfigError, "config", 2),
    (VolumeFormatError, "io", 3),
    (CheckpointError, "checkpoint", 4),
    (TrainingDiverged, "diverged", 5),
    (ShapeError, "shape", 6),
)


def _parse_int_list(raw: str) -> list[int]:
    return [int(part) for part in raw.split(",") if part.strip()]


def _parse_float_list(raw: str) -> list[float]:
    return [float(part) for part in raw.split(",") if part.strip()]


def load_records(data_dir: str | Path):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise VolumeFormatError(f"data directory not found: {data_dir}")
    dirs = sorted(p for p in data_dir.iterdir() if (p / "meta.txt").exists())
    if not dirs:
        raise VolumeFormatError(f"no volume directories under {data_dir}")
    return [read_volume(p) for p in dirs]


def _resolve_config(args, defaults: RunConfig) -> RunConfig:
    config = load_config(args.config) if args.config else defaults
    train = config.train
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "lr_drop_epochs", None) is not None:
        overrides["lr_drop_epochs"] = tuple(_parse_int_list(args.lr_drop_epochs))
    if getattr(args, "no_tiou", False):
        overrides["enable_tiou"] = False
    if getattr(args, "no_tpl", False):
        overrides["enable_tpl"] = False
    if getattr(args, "no_augment", False):
        overrides["augment"] = False
    if overrides:
        train = dataclasses.replace(train, **overrides)
    config = RunConfig(train=train, model=config.model)
    config.validate()
    return config


def _split(records, args):
    return dataset_split(records, args.train_fraction, args.split_seed)


def cmd_generate_data(args) -> int:
    out = Path(args.out)
    phantom = PhantomConfig() if not args.paper_scale else PhantomConfig.paper_scale()
    for i in range(args.count):
        record = generate_phantom(phantom, args.seed + i)
        write_volume(record, out / record.id)
    print(f"wrote {args.count} phantoms under {out}")
    return 0


def cmd_train_ird(args) -> int:
    from .training import train_detector

    config = _resolve_config(args, ird_defaults())
    records = load_records(args.data)
    train, _ = _split(records, args)
    final = train_detector(config, train, args.out, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def cmd_train_idpnet(args) -> int:
    from .training import detect_positions, train_depthnet

    config = _resolve_config(args, idpnet_defaults())
    records = load_records(args.data)
    train, _ = _split(records, args)
    positions = detect_positions(args.ird, train) if args.ird else None
    final = train_depthnet(config, train, args.out, resume=args.resume,
                           positions=positions)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    from .training import Pipeline

    records = load_records(args.data)
    _, test = _split(records, args)
    pipeline = Pipeline.from_checkpoints(
        idp_dir=args.idpnet, ird_dir=args.ird,
        oracle_position=args.oracle_position)
    result = evaluate(pipeline, test,
                      thresholds=tuple(_parse_float_list(args.thresholds)))
    write_report(result, args.out)
    for line in result.summary_lines():
        print(line)
    return 0


def cmd_predict(args) -> int:
    from .training import Pipeline, save_prediction_overlays

    record = read_volume(args.patient)
    pipeline = Pipeline.from_checkpoints(
        idp_dir=args.idpnet, ird_dir=args.ird,
        oracle_position=args.oracle_position)
    prediction = pipeline.predict_record(record)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "id": record.id,
        "interval": [prediction.interval.start, prediction.interval.end],
        "interval_crop": [prediction.interval_crop.start,
                          prediction.interval_crop.end],
        "position": list(prediction.position),
        "crop_origin": list(prediction.crop_origin),
    }
    (out / "prediction.json").write_text(json.dumps(payload, indent=2) + "\n",
                                         encoding="utf-8")
    if not args.no_overlay:
        save_prediction_overlays(record, prediction, out)
    print(json.dumps(payload))
    return 0


def cmd_analyze_texture(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.patient:
        record = read_volume(args.patient)
    else:
        record = generate_phantom(PhantomConfig(), args.phantom_seed)
    ks = _parse_int_list(args.ks)
    curve = texture_variation_curve(record.volume, ks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"id": record.id, "curve": [[k, v] for k, v in curve]}
    (out / "texture_curve.json").write_text(json.dumps(payload, indent=2) + "\n",
                                            encoding="utf-8")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([k for k, _ in curve], [v for _, v in curve], "o-")
    ax.set_xlabel("sampling interval k")
    ax.set_ylabel("edge-map variation")
    ax.set_title(record.id)
    fig.tight_layout()
    fig.savefig(out / "texture_curve.png", dpi=110)
    plt.close(fig)
    for k, v in curve:
        print(f"k={k}\tvariation={v:.5f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="implant-depth",
        description="Implant depth prediction pipeline (synthetic phantoms).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write synthetic phantom volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=cmd_generate_data)

    def add_train_common(p):
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr-drop-epochs", default=None)
        p.add_argument("--resume", default=None)
        p.add_argument("--no-augment", action="store_true")
        p.add_argument("--train-fraction", type=float, default=0.8)
        p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("train-ird", help="train the region detector")
    add_train_common(p)
    p.set_defaults(func=cmd_train_ird)

    p = sub.add_parser("train-idpnet", help="train the depth network")
    add_train_common(p)
    p.add_argument("--ird", default=None,
                   help="detector checkpoint to source crop positions from "
                        "(annotated positions otherwise)")
    p.add_argument("--no-tiou", action="store_true")
    p.add_argument("--no-tpl", action="store_true")
    p.set_defaults(func=cmd_train_idpnet)

    p = sub.add_parser("eval", help="evaluate the pipeline on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--idpnet", required=True)
    p.add_argument("--ird", default=None)
    p.add_argument("--oracle-position", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", default="0.6,0.7,0.8")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one patient directory")
    p.add_argument("--patient", required=True)
    p.add_argument("--idpnet", required=True)
    p.add_argument("--ird", default=None)
    p.add_argument("--oracle-position", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--no-overlay", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("analyze-texture", help="texture-variation curve")
    p.add_argument("--patient", default=None)
    p.add_argument("--phantom-seed", type=int, default=0)
    p.add_argument("--ks", default="1,5,10,15,20")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_texture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ImplantDepthError as exc:
        for klass, category, code in _CATEGORIES:
            if isinstance(exc, klass):
                print(f'error: category={category} message="{exc}"',
                      file=sys.stderr)
                return code
        print(f'error: category=internal message="{exc}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
