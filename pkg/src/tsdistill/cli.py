"""Command-line entry point: ``tsdistill <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .checkpoint import CheckpointError, load_train_state
from .config import ConfigError, RunConfig
from .data import (
    DataFormatError,
    SeriesSet,
    load_forecast_csv,
    load_labeled_tsv,
    synth_classification,
    synth_sine_forecast,
    write_forecast_csv,
    write_labeled_tsv,
    z_normalize,
)
from .heads import NumericError
from .pipeline import (
    EXIT_OK,
    classification_probe,
    forecast_probe,
    forecast_table,
    last_value_baseline,
    pooled_features,
    pretrain,
    probe_encoder,
    series_windows,
    train_portion,
)

logger = logging.getLogger("tsdistill")

EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NUMERIC = 70
SEED_ENV = "TSDISTILL_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- data helpers -------------------------------------------------------------

def is_forecast_file(path: Path) -> bool:
    """Headered CSVs start with a non-numeric first field; UCR rows start with a label."""
    with open(path) as fh:
        first = fh.readline()
    field = first.replace("\t", ",").split(",")[0].strip()
    try:
        float(field)
    except ValueError:
        return True
    return False


def test_path_for(train: Path, explicit: Optional[str]) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    name = train.name
    if "TRAIN" in name:
        candidate = train.with_name(name.replace("TRAIN", "TEST"))
        if candidate.exists():
            return candidate
    return None


def load_labeled_pair(data: Path, test: Optional[Path], normalize: bool) -> Tuple[SeriesSet, Optional[SeriesSet]]:
    train = load_labeled_tsv(data, split="train")
    test_set = None
    if test is not None:
        label_map = {name: i for i, name in enumerate(train.label_names)}
        test_set = load_labeled_tsv(test, label_map=label_map, split="test")
    if normalize:
        train, stats = z_normalize(train)
        if test_set is not None:
            test_set, _ = z_normalize(test_set, stats)
    return train, test_set


def load_series(data: Path, config: RunConfig) -> Tuple[SeriesSet, np.ndarray]:
    """A long forecasting series normalized with train-split statistics; returns (set, values [C, T])."""
    series = load_forecast_csv(data)
    if config.normalize:
        _, stats = z_normalize(train_portion(series, config))
        series, _ = z_normalize(series, stats)
    return series, series.values[0]


def _config(path: Optional[str]) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if os.environ.get(SEED_ENV):
        cfg = cfg.replace(seed=int(os.environ[SEED_ENV]))
    return cfg


# --- commands -------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    data = Path(args.data or cfg.data)
    out = Path(args.out or cfg.out or "run")
    if not str(data) or not data.exists():
        raise UsageError(f"data file {data} not found")
    if is_forecast_file(data):
        series, values = load_series(data, cfg)
        windows = series_windows(series, cfg)
        train = train_portion(series, cfg)

        def probe(enc):
            scores = forecast_probe(enc, values, windows, cfg.ridge_cv())
            return float(np.mean([mse for mse, _ in scores.values()]))

        res = pretrain(cfg, train, out, crop_window=cfg.forecast_context, probe_fn=probe,
                       higher_is_better=False, resume=args.resume)
    else:
        train, test = load_labeled_pair(data, test_path_for(data, args.test or cfg.test_data), cfg.normalize)
        probe = None
        if test is not None:
            def probe(enc):
                return classification_probe(enc, train, test, cfg.logistic_cv(), cfg.seed)[0]
        res = pretrain(cfg, train, out, probe_fn=probe, resume=args.resume)
    if res.record.best_score is not None:
        print(f"best probe score {res.record.best_score:.6f} at step {res.record.best_step}")
    print(f"final checkpoint {res.final_checkpoint}")
    return res.exit_code


def _append_score(ckpt: Path, line: str) -> None:
    with open(ckpt.parent / "probe_scores.tsv", "a") as fh:
        fh.write(line + "\n")


def cmd_probe(args) -> int:
    if args.task not in ("cls", "fc"):
        raise UsageError(f"unknown task {args.task!r}; expected cls or fc")
    state, cfg, _ = load_train_state(args.ckpt)
    network = args.network or cfg.probe_network
    enc = probe_encoder(state, network)
    data = Path(args.data)
    ckpt = Path(args.ckpt)
    if args.task == "cls":
        test_path = test_path_for(data, args.test)
        if test_path is None:
            raise UsageError("classification probing needs a test split (--test or a *_TRAIN file with a *_TEST twin)")
        train, test = load_labeled_pair(data, test_path, cfg.normalize)
        acc, _ = classification_probe(enc, train, test, cfg.logistic_cv(), cfg.seed)
        print(f"accuracy\t{acc:.6f}")
        _append_score(ckpt, f"{ckpt.name}\t{network}\tcls\t{data.name}\taccuracy\t{acc!r}")
    else:
        series, values = load_series(data, cfg)
        rows = forecast_table(forecast_probe(enc, values, series_windows(series, cfg), cfg.ridge_cv()))
        print("H\tMSE\tMAE")
        for h, mse, mae in rows:
            print(f"{h}\t{mse:.6f}\t{mae:.6f}")
        _append_score(ckpt, f"{ckpt.name}\t{network}\tfc\t{data.name}\tavg_mse\t{rows[-1][1]!r}")
    return EXIT_OK


def parse_horizons(text: str) -> List[int]:
    try:
        hs = [int(h) for h in text.split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"bad horizon list {text!r}") from None
    if not hs or min(hs) < 1:
        raise UsageError("horizons must be positive integers")
    return hs


def cmd_forecast(args) -> int:
    state, cfg, _ = load_train_state(args.ckpt)
    horizons = parse_horizons(args.horizons) if args.horizons else list(cfg.horizons)
    enc = probe_encoder(state, args.network or cfg.probe_network)
    series, values = load_series(Path(args.data), cfg)
    windows = series_windows(series, cfg, horizons)
    if "train" in windows.empty_splits or "test" in windows.empty_splits:
        raise DataFormatError(f"series too short for context {cfg.forecast_context} and horizon {max(horizons)}")
    rows = forecast_table(forecast_probe(enc, values, windows, cfg.ridge_cv()))
    base = [last_value_baseline(values, windows, "test", h) for h in horizons]
    base.append((float(np.mean([b[0] for b in base])), float(np.mean([b[1] for b in base]))))
    print("H\tMSE\tMAE\tLVCF_MSE\tLVCF_MAE")
    for (h, mse, mae), (bmse, bmae) in zip(rows, base):
        print(f"{h}\t{mse:.6f}\t{mae:.6f}\t{bmse:.6f}\t{bmae:.6f}")
    return EXIT_OK


def cmd_export(args) -> int:
    state, cfg, _ = load_train_state(args.ckpt)
    enc = probe_encoder(state, args.network or cfg.probe_network)
    data = Path(args.data)
    if is_forecast_file(data):
        data_set, _ = load_series(data, cfg)
    else:
        data_set, _ = load_labeled_pair(data, None, cfg.normalize)
    feats = pooled_features(enc, data_set).features
    with open(args.out, "w") as fh:
        fh.write(",".join(["instance"] + [f"f{j}" for j in range(feats.shape[1])]) + "\n")
        for i, row in enumerate(feats):
            fh.write(",".join([str(i)] + [repr(float(v)) for v in row]) + "\n")
    print(f"wrote {feats.shape[0]} rows to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    out = Path(args.out)
    if args.kind == "cls":
        stem = out.with_suffix("") if out.suffix else out
        for split, offset in (("TRAIN", 0), ("TEST", 1)):
            rng = np.random.default_rng([seed, offset])
            data = synth_classification(args.classes, args.n, args.length or 256, args.noise, rng)
            path = stem.with_name(f"{stem.name}_{split}.tsv")
            write_labeled_tsv(path, data)
            print(f"wrote {path}")
    elif args.kind == "sine":
        data = synth_sine_forecast(args.length or 4000, args.period, args.noise, np.random.default_rng(seed))
        write_forecast_csv(out, data.values[0], ["value"])
        print(f"wrote {out}")
    else:
        raise UsageError(f"unknown synth kind {args.kind!r}")
    return EXIT_OK


def cmd_template(args) -> int:
    sys.stdout.write(RunConfig().to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsdistill", description="Self-distillation pretraining and probing for time series.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--test", help="labeled test split for periodic probes")
    s.add_argument("--out")
    s.add_argument("--resume", type=Path, help="continue from a checkpoint")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="fit a probe on frozen representations")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--test")
    s.add_argument("--network", choices=("teacher", "student"))
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("forecast", help="ridge forecasting table per horizon")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--horizons")
    s.add_argument("--network", choices=("teacher", "student"))
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("export", help="write pooled representations as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--network", choices=("teacher", "student"))
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--kind", required=True, choices=("cls", "sine"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--n", type=int, default=150)
    s.add_argument("--length", type=int)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--period", type=float, default=50.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("template", help="print a config file with every default")
    s.set_defaults(func=cmd_template)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tsdistill: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"tsdistill: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, NumericError, linalg.LinAlgError) as exc:
        print(f"tsdistill: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
