"""Command line entry point: ``penletters {synth,train,eval,predict,gradcheck}``.

Exit codes: 0 success, 1 gradient check failed, 2 bad flags/config/data,
3 I/O failure (including corrupt checkpoints), 4 non-finite loss,
5 checkpoint written for a different model spec.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import Tensor, set_precision
from .dataset import (
    SplitConfig,
    load_manifest,
    load_samples,
    make_batches,
    read_sample_csv,
    synth_calibration,
    synth_channel_names,
    synth_generate,
    write_manifest,
    write_sample_csv,
    writer_exclusive_split,
)
from .exceptions import CheckpointError, ManifestError, NumericalError, SpecMismatchError
from .functional import softmax
from .gradcheck import DEFAULT_EPS, DEFAULT_THRESHOLD, run_gradcheck
from .labels import LABELS
from .model import ModelSpec
from .preprocessing import DEFAULT_KEEP, GYRO_CHANNELS, CalibrationTable, PreprocConfig, preprocess
from .training import TrainConfig, checkpoint_load, evaluate, fit, predict_logits

logger = logging.getLogger("penletters")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SPEC = 0, 1, 2, 3, 4, 5
RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    """Invalid flag combination detected after parsing."""


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"train fraction must lie in (0, 1], got {text}")
    return value


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--log-level", default="WARNING")
    return p


def _pipeline_flags() -> argparse.ArgumentParser:
    """Preprocessing and architecture flags shared by train/eval/predict."""
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help=f"replay a {RUN_MANIFEST} written by train")
    p.add_argument("--calib", type=Path, help="calibration CSV (channel,bias,scale)")
    p.add_argument("--keep-channels", type=_csv_list, default=list(DEFAULT_KEEP))
    p.add_argument("--gyro-channels", type=_csv_list, default=list(GYRO_CHANNELS))
    p.add_argument("--target-length", type=_positive_int, default=256)
    p.add_argument("--apply-log", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--exp-mode", choices=("signed", "plain"), default="signed")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="penletters", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common, pipeline = _global_flags(), _pipeline_flags()
    parser.subcommands = sub.choices

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--writers", type=_positive_int, default=5)
    p.add_argument("--per-class", type=_positive_int, default=1)
    p.add_argument("--channels", type=_positive_int, default=15)
    p.add_argument("--length", type=_positive_int, default=200)
    p.add_argument("--noise", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("train", parents=[common, pipeline], help="split, preprocess and fit")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--train-fraction", type=_fraction, default=0.8,
                   help="1.0 trains on every writer without a test set")
    p.add_argument("--epochs", type=_positive_int, default=500)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--checkpoint-every", type=_positive_int, default=50)
    p.add_argument("--eval-every", type=_positive_int, default=1)
    p.add_argument("--lr", type=_non_negative_float, default=3e-5)
    p.add_argument("--weight-decay", type=_non_negative_float, default=1e-3)
    p.add_argument("--final-epoch", type=_positive_int, default=None,
                   help="epoch whose checkpoint is reported as final (default: last)")

    p = sub.add_parser("eval", parents=[common, pipeline], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="defaults to the manifest of --config")
    p.add_argument("--batch-size", type=_positive_int, default=64)

    p = sub.add_parser("predict", parents=[common, pipeline], help="top-5 letters for one sample CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all backward rules")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--length", type=_positive_int, default=32)
    p.add_argument("--batch", type=_positive_int, default=2)
    p.add_argument("--width", type=int, choices=(2, 3, 4), default=None,
                   help="reduced-model width: every conv gets this many channels")
    p.add_argument("--corrupt-backward", default=None, help=argparse.SUPPRESS)
    return parser


def _parse(parser: argparse.ArgumentParser, argv: Optional[Sequence[str]]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    config = getattr(args, "config", None)
    if config is None:
        return args
    # defaults come from the saved run; flags given explicitly still win
    try:
        saved = json.loads(Path(config).read_text())
    except (OSError, ValueError) as exc:
        parser.exit(EXIT_IO, f"penletters: cannot read config {config}: {exc}\n")
    values = dict(saved.get("args", {}))
    for key in ("out_dir", "manifest", "calib"):
        if values.get(key) is not None:
            values[key] = Path(values[key])
    values.pop("command", None)
    values.pop("config", None)
    subparser = parser.subcommands[args.command]
    known = set(vars(args))
    subparser.set_defaults(**{k: v for k, v in values.items() if k in known})
    return parser.parse_args(argv)


def _close_logging() -> None:
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()


def _setup_logging(args: argparse.Namespace, log_file: Optional[Path] = None) -> None:
    logger.setLevel(logging.DEBUG)
    _close_logging()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(args.log_level.upper())
    console.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(console)
    if log_file is not None:
        fh = logging.FileHandler(log_file)
        fh.setLevel(logging.INFO)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        logger.addHandler(fh)


def _preproc_config(args: argparse.Namespace) -> PreprocConfig:
    calib = CalibrationTable.from_csv(args.calib) if args.calib else None
    return PreprocConfig(tuple(args.keep_channels), tuple(args.gyro_channels), args.target_length,
                         args.apply_log, calib)


def _model_spec(args: argparse.Namespace, preproc: PreprocConfig) -> ModelSpec:
    return ModelSpec(input_channels=len(preproc.keep_channels), exp_mode=args.exp_mode)


def _json_value(v):
    if isinstance(v, Path):
        return str(v.resolve())
    return v


# -- subcommands -------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    out: Path = args.out_dir
    if not out.is_dir():
        print(f"penletters: output directory {out} does not exist", file=sys.stderr)
        return EXIT_IO
    names = synth_channel_names(args.channels)
    calib = synth_calibration(names, args.seed)
    samples, manifest = synth_generate(args.writers, args.per_class, args.channels, args.length,
                                       args.seed, noise=args.noise, calibration=calib)
    (out / "samples").mkdir(exist_ok=True)
    for sample, entry in zip(samples, manifest):
        write_sample_csv(sample, out / entry.sample_path)
    write_manifest(manifest, out / "manifest.csv")
    calib.to_csv(out / "calibration.csv")
    print(f"wrote {len(samples)} samples, manifest.csv and calibration.csv to {out}")
    return EXIT_OK


def _load_processed(entries, preproc: PreprocConfig):
    return [preprocess(raw, preproc) for raw in load_samples(entries)]


def cmd_train(args: argparse.Namespace) -> int:
    if args.manifest is None:
        raise UsageError("train needs --manifest (or --config)")
    config = TrainConfig(args.epochs, args.batch_size, args.seed, args.checkpoint_every, args.eval_every,
                         args.lr, args.weight_decay, args.final_epoch)
    preproc = _preproc_config(args)
    spec = _model_spec(args, preproc)

    out: Path = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    run = {"command": "train",
           "args": {k: _json_value(v) for k, v in sorted(vars(args).items()) if k not in ("command", "config")}}
    (out / RUN_MANIFEST).write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    _setup_logging(args, out / "run.log")
    entries = load_manifest(args.manifest)
    if not entries:
        raise ManifestError(f"{args.manifest}: manifest has no samples")
    if args.train_fraction >= 1.0:
        train_entries, test_entries = list(entries), []
    else:
        train_entries, test_entries = _split(entries, args)
    logger.info("train %d samples, test %d samples", len(train_entries), len(test_entries))
    train = _load_processed(train_entries, preproc)
    test = _load_processed(test_entries, preproc) if test_entries else []
    result = fit(train, test, spec, config, out, meta={"preproc": preproc.to_dict()})
    last = result.metrics[-1]
    print(f"epochs {len(result.metrics)} train_loss {last.train_loss:.6f} train_acc {last.train_acc:.6f}")
    if last.test_acc is not None:
        print(f"test_loss {last.test_loss:.6f} test_acc {last.test_acc:.6f}")
    print(f"final checkpoint {result.final_checkpoint}")
    return EXIT_OK


def _split(entries, args):
    try:
        return writer_exclusive_split(entries, SplitConfig(args.train_fraction, args.seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args: argparse.Namespace) -> int:
    if args.manifest is None:
        raise UsageError("eval needs --manifest (or --config)")
    _setup_logging(args)
    preproc = _preproc_config(args)
    model = checkpoint_load(args.checkpoint, _model_spec(args, preproc))
    entries = load_manifest(args.manifest)
    if not entries:
        raise ManifestError(f"{args.manifest}: manifest has no samples")
    samples = _load_processed(entries, preproc)
    result = evaluate(model, make_batches(samples, args.batch_size))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    result.confusion.to_csv(args.out_dir / "confusion_matrix.csv")
    print(f"accuracy {result.accuracy!r}")
    print(f"loss {result.loss!r}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    _setup_logging(args)
    preproc = _preproc_config(args)
    model = checkpoint_load(args.checkpoint, _model_spec(args, preproc))
    raw = read_sample_csv(args.sample)
    sample = preprocess(raw, preproc, label_index=0)
    logits = predict_logits(model, Tensor(sample.data[None]))
    probs = softmax(logits.astype(np.float64))[0]
    order = np.argsort(-probs, kind="stable")[:5]
    for i in order:
        print(f"{LABELS.char(int(i))} {probs[i]:.6f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    _setup_logging(args)
    spec = ModelSpec.reduced(widths=(args.width,) * 8) if args.width else ModelSpec.reduced()
    report = run_gradcheck(seed=args.seed, length=args.length, batch=args.batch, spec=spec,
                           eps=args.eps, threshold=args.threshold, corrupt=args.corrupt_backward)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict} max relative error {report.max_error:.3e} (threshold {report.threshold:g})")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = _parse(parser, argv)
    set_precision(args.precision)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"penletters: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpecMismatchError as exc:
        print(f"penletters: spec mismatch: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except CheckpointError as exc:
        print(f"penletters: unreadable checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"penletters: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, KeyError, ValueError) as exc:
        print(f"penletters: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"penletters: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        set_precision("f32")
        _close_logging()


if __name__ == "__main__":
    sys.exit(main())
