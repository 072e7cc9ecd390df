"""UCR-archive ingestion, normalization and mini-batching."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed, empty or degenerate datasets."""


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Fixed-length univariate series with contiguous integer labels.

    ``samples`` holds the (possibly normalized) values, ``raw`` the values as
    read from disk after missing-value repair.  ``mean``/``std`` are the
    statistics applied to produce ``samples`` (0 and 1 when unnormalized).
    """

    samples: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = "train"
    mean: float = 0.0
    std: float = 1.0
    raw: Optional[np.ndarray] = None
    label_values: tuple = field(default_factory=tuple)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim != 2:
            raise DatasetError(f"samples must be 2-D, got shape {samples.shape}")
        if samples.shape[0] == 0:
            raise DatasetError("empty dataset")
        if samples.shape[1] < 2:
            raise DatasetError("series length must be at least 2")
        if labels.shape != (samples.shape[0],):
            raise DatasetError("labels must have one entry per sample")
        if not np.all(np.isfinite(samples)):
            raise DatasetError("non-finite values in samples")
        if labels.min() < 0:
            raise DatasetError("labels must be non-negative class indices")
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        if self.raw is None:
            object.__setattr__(self, "raw", samples)
        if not self.label_values:
            object.__setattr__(self, "label_values", tuple(range(int(labels.max()) + 1)))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.label_values)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def _parse_label(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DatasetError(f"line {lineno}: label {token!r} is not numeric") from None
    if not np.isfinite(value) or value != int(value):
        raise DatasetError(f"line {lineno}: label {token!r} is not an integer")
    return value


def repair_missing(row: np.ndarray) -> np.ndarray:
    """Fill NaNs by linear interpolation; edge gaps copy the nearest finite value."""
    row = np.asarray(row, dtype=np.float64)
    finite = np.isfinite(row)
    if finite.all():
        return row
    if not finite.any():
        raise DatasetError("series has no finite values")
    idx = np.arange(row.size)
    # np.interp holds the end values constant outside the data range
    return np.interp(idx, idx[finite], row[finite])


def load_ucr(path, split: str = "train", name: Optional[str] = None) -> TimeSeriesDataset:
    """Read a UCR text file (label column followed by values).

    Fields may be separated by tabs, commas or any whitespace.  Labels are
    remapped to ``0..C-1`` in ascending order of their original values.
    """
    path = Path(path)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    rows, labels = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").split()
            if width is None:
                width = len(fields)
                if width < 3:
                    raise DatasetError(f"line {lineno}: expected a label and at least 2 values")
            elif len(fields) != width:
                raise DatasetError(
                    f"line {lineno}: expected {width} fields, found {len(fields)}"
                )
            labels.append(_parse_label(fields[0], lineno))
            try:
                values = np.array([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
            try:
                rows.append(repair_missing(values))
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
    if not rows:
        raise DatasetError(f"empty dataset: {path}")
    label_values = sorted(set(labels))
    remap = {v: i for i, v in enumerate(label_values)}
    samples = np.vstack(rows)
    return TimeSeriesDataset(
        samples=samples,
        labels=np.array([remap[v] for v in labels]),
        name=name or path.stem.rsplit("_", 1)[0],
        split=split,
        raw=samples,
        label_values=tuple(int(v) for v in label_values),
    )


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get("TIMEVQ_DATA_DIR", Path(__file__).resolve().parents[2] / "data")
    return Path(data_dir)


def load_ucr_dataset(name: str, data_dir=None, normalize_per_series: bool = False):
    """Load ``<name>/<name>_TRAIN.tsv`` and ``_TEST.tsv`` and normalize both
    with the train statistics.  Returns ``(train, test)``."""
    root = resolve_data_dir(data_dir) / name
    train = load_ucr(root / f"{name}_TRAIN.tsv", "train", name)
    test = load_ucr(root / f"{name}_TEST.tsv", "test", name)
    # test labels must index the same classes as train
    lookup = {v: i for i, v in enumerate(train.label_values)}
    unknown = set(test.label_values) - set(lookup)
    if unknown:
        raise DatasetError(f"test split has labels unseen in train: {sorted(unknown)}")
    test_labels = np.array([lookup[test.label_values[k]] for k in test.labels])
    test = replace(test, labels=test_labels, label_values=train.label_values)
    train_n = normalize(train, per_series=normalize_per_series)
    test_n = normalize(test, reference=train_n, per_series=normalize_per_series)
    return train_n, test_n


def normalize(ds: TimeSeriesDataset, reference: Optional[TimeSeriesDataset] = None,
              per_series: bool = False) -> TimeSeriesDataset:
    """Standardize to zero mean, unit (population) variance.

    Statistics come from the flattened ``raw`` values of ``reference`` when
    given (use the normalized train split for test data), else from ``ds``.
    ``per_series`` z-normalizes each row independently instead.
    """
    raw = ds.raw
    if per_series:
        mu = raw.mean(axis=1, keepdims=True)
        sd = raw.std(axis=1, keepdims=True)
        if np.any(sd == 0):
            raise DatasetError("constant dataset: a series has zero variance")
        return replace(ds, samples=(raw - mu) / sd, mean=0.0, std=1.0)
    if reference is not None:
        mean, std = reference.mean, reference.std
    else:
        if raw.size < 2:
            raise DatasetError("need at least 2 values to normalize")
        mean, std = float(raw.mean()), float(raw.std())
        if std == 0.0:
            raise DatasetError("constant dataset")
    return replace(ds, samples=(raw - mean) / std, mean=mean, std=std)


def denormalize(x, mean: float, std: float) -> np.ndarray:
    return np.asarray(x) * std + mean


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n)


def batches(ds: TimeSeriesDataset, batch_size: int, shuffle: bool = False,
            seed: int = 0, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(samples, labels)`` covering every sample once.

    The order is a deterministic function of ``(seed, epoch)`` when shuffling.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(ds), shuffle, seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.samples[idx], ds.labels[idx]
