"""Command-line entry point: ``roiensemble {train,eval,fuse,synth-data,report}``.

Exit codes: 0 success, 1 unexpected failure, 2 config error, 3 divergence,
4 missing or unusable artifact, 5 data inconsistency.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .architectures import build_model
from .config import FAMILIES, ConfigError, ExperimentConfig, load_config, parse_config
from .ensemble import argmax_class, fuse_prob_files, fuse_sum, write_predictions_csv, write_prob_csv
from .errors import (
    CheckpointError,
    DataInconsistencyError,
    DivergedError,
    InvalidAnnotationError,
    InvalidSplitError,
    RoiEnsembleError,
    UnsupportedFormatError,
)
from .metrics import ConfusionMatrix, compute_report, format_table, read_report_csv, report_csv
from .training import evaluate_model, load_checkpoint, save_checkpoint, train_model

log = logging.getLogger("roiensemble")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4
EXIT_DATA = 5

ROW_NAMES = {"densenet": "DenseNet", "efficientnet": "EfficientNet", "xception": "XceptionNet"}
ENSEMBLE_ROW = "Ensembling"


class MissingArtifactError(RoiEnsembleError):
    pass


def _write_text(path: Path, text: str) -> None:
    # explicit LF endings on every platform
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out if args.out else cfg.output_dir)


def experiment_split(cfg: ExperimentConfig) -> D.DatasetSplit:
    """The train/test split described by the data section."""
    d = cfg.data
    if d.source == "synthetic":
        samples = D.synthesize_dataset(d.seed, d.per_class, d.resolution)
    else:
        samples = D.load_annotated_dataset(d.directory, d.annotations, d.resolution)
    return D.train_test_split(samples, d.test_fraction, d.seed)


# ----------------------------------------------------------------- commands


def run_train(cfg: ExperimentConfig, out: Path, split: D.DatasetSplit | None = None, echo=print) -> None:
    """Train every family on the configured split and write checkpoints plus the log."""
    if split is None:
        split = experiment_split(cfg)
    out.mkdir(parents=True, exist_ok=True)
    log_rows = []
    for family in FAMILIES:
        spec = cfg.specs[family]
        model = build_model(spec, seed=cfg.train.seed)
        report = train_model(model, split, cfg.train)
        save_checkpoint(model, out / f"{family}.ckpt")
        for epoch, (loss, acc) in enumerate(zip(report.epoch_loss, report.epoch_accuracy), start=1):
            log_rows.append([family, epoch, f"{loss:.6f}", f"{acc:.4f}"])
        echo(f"{family}: final loss {report.epoch_loss[-1]:.4f}, train accuracy {report.epoch_accuracy[-1]:.4f}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "epoch", "loss", "accuracy"])
    w.writerows(log_rows)
    _write_text(out / "train_log.csv", buf.getvalue())


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    # data errors surface before the output directory is created
    split = experiment_split(cfg)
    run_train(cfg, _out_dir(args, cfg), split)
    return EXIT_OK


def run_eval(cfg: ExperimentConfig, checkpoints: Path, out: Path) -> str:
    """Evaluate the three checkpoints and their ensemble; returns the rendered table."""
    paths = {f: checkpoints / f"{f}.ckpt" for f in FAMILIES}
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise MissingArtifactError(f"missing checkpoint(s): {', '.join(missing)}")
    models = {f: load_checkpoint(paths[f], cfg.specs[f]) for f in FAMILIES}
    split = experiment_split(cfg)
    y = D.labels_of(split.test)
    ids = [s.source_id for s in split.test]
    k = models[FAMILIES[0]].num_classes

    out.mkdir(parents=True, exist_ok=True)
    rows, probs = [], []
    for family in FAMILIES:
        preds, p = evaluate_model(models[family], split.test)
        probs.append(p)
        cm = ConfusionMatrix.from_labels(y, preds, k)
        rows.append((ROW_NAMES[family], compute_report(cm)))
        _write_text(out / f"confusion_{family}.csv", cm.to_csv())
        write_prob_csv(out / f"probs_{family}.csv", ids, p)
    preds = argmax_class(fuse_sum(probs))
    cm = ConfusionMatrix.from_labels(y, preds, k)
    rows.append((ENSEMBLE_ROW, compute_report(cm)))
    _write_text(out / "confusion_ensemble.csv", cm.to_csv())

    table = format_table(rows)
    _write_text(out / "metrics.csv", report_csv(rows))
    _write_text(out / "table.txt", table)
    return table


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    checkpoints = Path(args.checkpoints) if args.checkpoints else out
    sys.stdout.write(run_eval(cfg, checkpoints, out))
    return EXIT_OK


def cmd_fuse(args) -> int:
    ids, preds, _ = fuse_prob_files(args.files)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_predictions_csv(out / "predictions.csv", ids, preds)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "prediction"])
        w.writerows([sid, int(p)] for sid, p in zip(ids, np.atleast_1d(preds)))
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_synth_data(args) -> int:
    """Write the configured synthetic split as a dataset cache plus PGM images and annotations."""
    cfg = _resolve_config(args)
    d = cfg.data
    out = _out_dir(args, cfg)
    samples = D.synthesize_dataset(d.seed, d.per_class, d.resolution)
    split = D.train_test_split(samples, d.test_fraction, d.seed)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    D.save_dataset(out / "dataset.ensd", split)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "cx", "cy", "radius", "label"])
    half = d.resolution // 2
    for s in samples:
        name = f"{s.source_id}.pgm"
        D.save_image(images / name, s.patch[0])
        # the ROI covers the whole patch
        w.writerow([name, half, half, half, D.CLASS_NAMES[s.label]])
    _write_text(out / "annotations.csv", buf.getvalue())
    print(f"wrote {len(samples)} samples ({len(split.train)} train, {len(split.test)} test) to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = None
    if args.metrics:
        metrics = Path(args.metrics)
    else:
        cfg = _resolve_config(args)
        metrics = _out_dir(args, cfg) / "metrics.csv"
    if not metrics.is_file():
        raise MissingArtifactError(f"missing metrics file: {metrics}")
    sys.stdout.write(format_table(read_report_csv(metrics.read_text(encoding="utf-8"))))
    return EXIT_OK


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roiensemble", description="Three-CNN probability-sum ensemble for ROI patches.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="flat section.key = value config file")
        p.add_argument("--seed", type=int, metavar="N", help="overrides data.seed and train.seed")
        p.add_argument("--out", metavar="DIR", help="output directory (default: output.dir)")

    p = sub.add_parser("train", help="train the three models and write checkpoints")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints and the ensemble on the test split")
    common(p)
    p.add_argument("--checkpoints", metavar="DIR", help="checkpoint directory (default: --out)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="sum probability CSVs and write argmax predictions")
    p.add_argument("files", nargs="+", metavar="FILE")
    p.add_argument("--out", metavar="DIR", help="write DIR/predictions.csv instead of stdout")
    p.set_defaults(func=cmd_fuse, config=None, seed=None)

    p = sub.add_parser("synth-data", help="write the synthetic dataset as PGM images and a cache file")
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("report", help="re-render the results table from metrics.csv")
    common(p)
    p.add_argument("--metrics", metavar="PATH", help="metrics.csv to render (default: DIR/metrics.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingArtifactError, CheckpointError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DataInconsistencyError, InvalidAnnotationError, InvalidSplitError, UnsupportedFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RoiEnsembleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
