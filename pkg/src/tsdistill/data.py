"""Loading, normalizing, cropping and windowing time series; synthetic datasets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DataFormatError(ValueError):
    """A data file does not follow its expected format."""


@dataclass
class SeriesSet:
    """``N`` series with ``C`` channels, right-padded to a common length.

    ``values`` is ``[N, C, T_max]`` with zeros past each series' end and
    ``lengths[i]`` real timesteps for series ``i``.
    """

    values: np.ndarray
    lengths: np.ndarray
    labels: Optional[np.ndarray] = None
    label_names: Optional[List[str]] = None
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.values.ndim != 3:
            raise ValueError(f"values must be [N, C, T], got {self.values.shape}")
        if self.lengths.shape != (self.values.shape[0],):
            raise ValueError("one length per series required")
        if np.any(self.lengths < 1) or np.any(self.lengths > self.values.shape[2]):
            raise ValueError("lengths must lie in [1, T_max]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise ValueError("one label per series required")
            if np.any(self.labels < 0):
                raise ValueError("labels must be non-negative")

    @property
    def num_series(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    @property
    def max_length(self) -> int:
        return self.values.shape[2]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        if self.label_names is not None:
            return len(self.label_names)
        return int(self.labels.max()) + 1

    @property
    def valid(self) -> np.ndarray:
        """``[N, T_max]`` boolean mask of real timesteps."""
        return np.arange(self.max_length)[None, :] < self.lengths[:, None]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant_channels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must cover the same channels")
        if np.any(self.std < 0):
            raise ValueError("std must be non-negative")
        if self.constant_channels is None:
            self.constant_channels = self.std == 0


# --- loaders -----------------------------------------------------------------

def _sniff_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _parse_float(text: str, where: str) -> float:
    text = text.strip()
    if text.lower() in ("nan", ""):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"{where}: non-numeric value {text!r}") from None


def load_labeled_tsv(path: PathLike, label_map: Optional[Dict[str, int]] = None, split: str = "train") -> SeriesSet:
    """Read a UCR-style file: one series per row, class label first.

    Tab or comma delimited (auto-detected).  Trailing NaNs mark a shorter
    series; NaNs in the middle are rejected.  Labels are remapped to
    ``0..K-1`` in sorted order unless ``label_map`` (e.g. from the train
    split) is given.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    delim = _sniff_delimiter(lines[0])
    raw_labels: List[str] = []
    rows: List[np.ndarray] = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.rstrip("\r\n").split(delim)
        if len(fields) < 2:
            raise DataFormatError(f"{path}:{lineno}: expected a label and at least one value")
        raw_labels.append(fields[0].strip())
        vals = np.array([_parse_float(f, f"{path}:{lineno}") for f in fields[1:]])
        finite = ~np.isnan(vals)
        n = int(finite.sum())
        if n == 0:
            raise DataFormatError(f"{path}:{lineno}: row has no values")
        if not finite[:n].all():
            raise DataFormatError(f"{path}:{lineno}: missing values are only allowed as trailing padding")
        rows.append(vals[:n])
    lengths = np.array([len(r) for r in rows])
    values = np.zeros((len(rows), 1, lengths.max()))
    for i, r in enumerate(rows):
        values[i, 0, : len(r)] = r
    if label_map is None:
        label_map = {name: i for i, name in enumerate(sorted(set(raw_labels), key=_label_sort_key))}
    unknown = sorted(set(raw_labels) - set(label_map))
    if unknown:
        raise DataFormatError(f"{path}: labels {unknown} not present in the label map")
    names = [None] * len(label_map)
    for name, idx in label_map.items():
        names[idx] = name
    labels = np.array([label_map[l] for l in raw_labels])
    return SeriesSet(values, lengths, labels, names, split=split, name=path.stem)


def _label_sort_key(text: str):
    try:
        return (0, float(text), text)
    except ValueError:
        return (1, 0.0, text)


def write_labeled_tsv(path: PathLike, data: SeriesSet, delimiter: str = "\t") -> None:
    names = data.label_names or [str(i) for i in range(data.num_classes)]
    with open(path, "w") as fh:
        for i in range(data.num_series):
            vals = data.values[i, 0, : data.lengths[i]]
            label = names[data.labels[i]] if data.labels is not None else "0"
            fh.write(delimiter.join([label] + [repr(float(v)) for v in vals]) + "\n")


def load_forecast_csv(path: PathLike, columns: Optional[Sequence[str]] = None) -> SeriesSet:
    """Read a headered CSV with rows in time order into a single multichannel series.

    Without ``columns`` every column except a leading ``date``/``time`` column is used.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DataFormatError(f"{path}: need a header row and at least one data row")
    reader = csv.reader(lines, delimiter=_sniff_delimiter(lines[0]))
    header = [h.strip() for h in next(reader)]
    if columns is None:
        columns = [h for h in header if h.lower() not in ("date", "time", "timestamp")]
    missing = [c for c in columns if c not in header]
    if missing:
        raise DataFormatError(f"{path}: columns {missing} not found in header {header}")
    if not columns:
        raise DataFormatError(f"{path}: no value columns")
    idx = [header.index(c) for c in columns]
    rows = []
    for rowno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{rowno}: expected {len(header)} fields, got {len(row)}")
        vals = []
        for c, j in zip(columns, idx):
            v = _parse_float(row[j], f"{path}:{rowno} column {c!r}")
            if math.isnan(v):
                raise DataFormatError(f"{path}:{rowno} column {c!r}: missing value")
            vals.append(v)
        rows.append(vals)
    values = np.asarray(rows, dtype=np.float64).T[None]
    return SeriesSet(values, [values.shape[2]], name=path.stem)


def write_forecast_csv(path: PathLike, values: np.ndarray, columns: Sequence[str]) -> None:
    """Write ``values`` ``[C, T]`` as a headered CSV."""
    values = np.atleast_2d(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for t in range(values.shape[1]):
            w.writerow([repr(float(v)) for v in values[:, t]])


# --- normalization ---------------------------------------------------------------

def compute_norm_stats(data: SeriesSet) -> NormStats:
    mask = data.valid[:, None, :]
    n = mask.sum(axis=(0, 2))
    mean = (data.values * mask).sum(axis=(0, 2)) / n
    var = (((data.values - mean[None, :, None]) * mask) ** 2).sum(axis=(0, 2)) / n
    return NormStats(mean, np.sqrt(var))


def z_normalize(data: SeriesSet, stats: Optional[NormStats] = None) -> Tuple[SeriesSet, NormStats]:
    """Standardize each channel with ``stats`` (computed from ``data`` when omitted).

    Pass the train split's stats when normalizing a test split.  Zero-variance
    channels map to zero and are flagged in ``stats.constant_channels``.
    """
    if stats is None:
        if data.num_series == 0:
            raise ValueError("cannot compute statistics from an empty split")
        stats = compute_norm_stats(data)
    elif stats.mean.shape != (data.num_channels,):
        raise ValueError(f"stats cover {stats.mean.shape[0]} channels, data has {data.num_channels}")
    if stats.constant_channels.any():
        logger.warning("constant channels %s map to zero", np.flatnonzero(stats.constant_channels).tolist())
    std = np.where(stats.constant_channels, 1.0, stats.std)
    out = (data.values - stats.mean[None, :, None]) / std[None, :, None]
    out[:, stats.constant_channels, :] = 0.0
    out = out * data.valid[:, None, :]
    return replace(data, values=out), stats


# --- cropping and windowing ------------------------------------------------------

def random_crop(
    data: SeriesSet,
    window: int,
    rng: np.random.Generator,
    indices: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Crop each selected series to a random contiguous window.

    Series shorter than ``window`` are returned whole, right-padded.

    Returns:
        ``(batch [B, C, L], valid [B, L])`` with ``L = min(window, longest selected)``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    idx = np.arange(data.num_series) if indices is None else np.asarray(indices)
    lengths = data.lengths[idx]
    L = int(min(window, lengths.max()))
    batch = np.zeros((len(idx), data.num_channels, L))
    valid = np.zeros((len(idx), L), dtype=bool)
    for row, (i, n) in enumerate(zip(idx, lengths)):
        if n >= window:
            start = int(rng.integers(0, n - window + 1))
            batch[row] = data.values[i, :, start: start + window]
            valid[row] = True
        else:
            batch[row, :, :n] = data.values[i, :, :n]
            valid[row, :n] = True
    return batch, valid


@dataclass
class ForecastWindows:
    """Sliding (context, target) windows over one long series, per split.

    ``starts[split]`` holds context start indices; the context is
    ``[s, s + context_len)`` and the target for horizon ``h`` is
    ``[s + context_len, s + context_len + h)``.
    """

    context_len: int
    horizons: List[int]
    starts: Dict[str, np.ndarray]
    bounds: Dict[str, Tuple[int, int]]
    num_channels: int = 1
    empty_splits: List[str] = field(default_factory=list)

    def context_indices(self, split: str) -> np.ndarray:
        return self.starts[split][:, None] + np.arange(self.context_len)[None, :]

    def target_indices(self, split: str, horizon: int) -> np.ndarray:
        s = self.starts[split] + self.context_len
        return s[:, None] + np.arange(horizon)[None, :]


def split_bounds(length: int, fractions: Sequence[float] = (0.6, 0.2, 0.2),
                 names: Sequence[str] = ("train", "val", "test")) -> Dict[str, Tuple[int, int]]:
    """Contiguous time-ordered split boundaries."""
    cuts = np.floor(np.cumsum([0.0] + list(fractions)) * length + 1e-9).astype(int)
    cuts[-1] = length
    return {n: (int(cuts[i]), int(cuts[i + 1])) for i, n in enumerate(names)}


def make_forecast_windows(
    length: int,
    context_len: int,
    horizons: Sequence[int],
    bounds: Dict[str, Tuple[int, int]],
    num_channels: int = 1,
) -> ForecastWindows:
    """Stride-1 windows that never cross a split boundary.

    Every window leaves room for the longest horizon, so all horizons share
    the same contexts.
    """
    horizons = [int(h) for h in horizons]
    if not horizons or min(horizons) < 1:
        raise ValueError("horizons must be positive")
    if context_len < 1:
        raise ValueError("context_len must be positive")
    hmax = max(horizons)
    starts, empty = {}, []
    for name, (a, b) in bounds.items():
        if not 0 <= a <= b <= length:
            raise ValueError(f"split {name} bounds {(a, b)} outside [0, {length}]")
        n = (b - a) - context_len - hmax + 1
        if n < 1:
            empty.append(name)
            logger.warning("split %s too short for context %d + horizon %d", name, context_len, hmax)
            starts[name] = np.zeros(0, dtype=np.int64)
        else:
            starts[name] = a + np.arange(n, dtype=np.int64)
    return ForecastWindows(context_len, horizons, starts, dict(bounds), num_channels, empty)


# --- synthetic data ----------------------------------------------------------------

def synth_classification(num_classes: int, n: int, length: int, noise: float,
                         rng: np.random.Generator, split: str = "train") -> SeriesSet:
    """Noisy sinusoids whose class sets the frequency.

    Class ``c`` oscillates at ``2 * pi * 4 * (c + 1) / length`` radians per step,
    i.e. ``4 * (c + 1)`` full cycles per series, with a random phase.
    """
    labels = rng.permutation(np.arange(n) % num_classes)
    t = np.arange(length)
    freq = 2 * np.pi * 4 * (labels + 1) / length
    phase = rng.uniform(0, 2 * np.pi, size=n)
    values = np.sin(freq[:, None] * t[None, :] + phase[:, None])
    values = values + noise * rng.standard_normal(values.shape)
    return SeriesSet(values[:, None, :], np.full(n, length), labels,
                     [str(c) for c in range(num_classes)], split=split, name="synth_cls")


def synth_sine_forecast(length: int, period: float, noise: float, rng: np.random.Generator) -> SeriesSet:
    """Single-channel sinusoid with the given period plus Gaussian noise."""
    t = np.arange(length)
    phase = rng.uniform(0, 2 * np.pi)
    values = np.sin(2 * np.pi * t / period + phase) + noise * rng.standard_normal(length)
    return SeriesSet(values[None, None, :], [length], name="synth_sine")
