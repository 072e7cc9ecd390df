"""FCN classifier and the FID / IS / CAS evaluation protocol."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import rel_entr

from .dataset import TimeSeriesDataset, epoch_order


class MetricError(ValueError):
    pass


class FcnModel(nn.Module):
    """Three conv blocks (128/256/128 channels, kernels 8/5/3), global
    average pooling and a linear head."""

    feature_dim = 128

    def __init__(self, n_classes: int, in_channels: int = 1):
        super().__init__()
        widths, kernels = (128, 256, 128), (8, 5, 3)
        layers, ch = [], in_channels
        for w, k in zip(widths, kernels):
            # 'same' padding, written out: conv1d warns and copies for even kernels
            layers += [nn.ConstantPad1d(((k - 1) // 2, k // 2), 0.0), nn.Conv1d(ch, w, k),
                       nn.BatchNorm1d(w), nn.ReLU()]
            ch = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(ch, n_classes)
        self.n_classes = n_classes
        self.test_accuracy: Optional[float] = None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(1)
        return self.body(x).mean(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _batched(model: FcnModel, x, fn, batch_size: int = 512) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.tensor(np.asarray(x), dtype=dtype)
    with torch.no_grad():
        out = [fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy()


def features(model: FcnModel, samples) -> np.ndarray:
    """GAP-layer activations, ``(N, 128)``."""
    return _batched(model, samples, model.features)


def predict_proba(model: FcnModel, samples) -> np.ndarray:
    return _batched(model, samples, lambda x: torch.softmax(model(x), dim=-1))


def accuracy(model: FcnModel, samples, labels) -> float:
    return float(np.mean(predict_proba(model, samples).argmax(1) == np.asarray(labels)))


def _xy(data, labels=None):
    if isinstance(data, TimeSeriesDataset):
        return data.samples, data.labels
    return np.asarray(data), np.asarray(labels)


def train_fcn(train, test=None, n_classes: Optional[int] = None, epochs: int = 1000,
              batch_size: int = 256, lr: float = 1e-3, weight_decay: float = 1e-5,
              seed: int = 0, labels=None) -> FcnModel:
    """Supervised FCN training (AdamW + cosine schedule).

    ``train``/``test`` are datasets or ``(samples, labels)`` tuples.  The test
    accuracy, when a test set is given, is stored on ``model.test_accuracy``.
    """
    x, y = _xy(*train) if isinstance(train, tuple) else _xy(train, labels)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise MetricError("FCN training needs at least two classes")
    torch.manual_seed(seed)
    model = FcnModel(n_classes)
    steps = epochs * math.ceil(len(x) / batch_size)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps))
    xt = torch.tensor(x, dtype=torch.float32)
    yt = torch.tensor(y, dtype=torch.long)
    model.train()
    for epoch in range(epochs):
        order = torch.as_tensor(epoch_order(len(x), True, seed, epoch))
        for lo in range(0, len(x), batch_size):
            idx = order[lo:lo + batch_size]
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            loss = F.cross_entropy(model(xt[idx]), yt[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
    model.eval()
    if test is not None:
        tx, ty = _xy(*test) if isinstance(test, tuple) else _xy(test)
        model.test_accuracy = accuracy(model, tx, ty)
    return model


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(feat_real, feat_gen, tol: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    The trace term uses the eigenvalues of the symmetric matrix
    ``sqrt(S_r) S_g sqrt(S_r)``; negative eigenvalues down to ``-tol`` (relative
    to the largest) are treated as round-off and clipped.
    """
    a = np.asarray(feat_real, dtype=np.float64)
    b = np.asarray(feat_gen, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError("feature sets must be 2-D with equal width")
    if len(a) < 2 or len(b) < 2:
        raise MetricError("FID needs at least two samples per set")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("non-finite features")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise MetricError("non-finite covariance")
    root = _sqrtm_psd(cov_a)
    m = root @ cov_b @ root
    w = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise MetricError(f"covariance product has a negative eigenvalue {w.min():.3g}")
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
    return max(value, 0.0)


def inception_score_from_probs(probs, n_splits: int = 1):
    """exp(E_x KL(p(y|x) || p(y))) per split; returns ``(mean, std)``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise MetricError("predictions must be a non-empty (N, C) matrix")
    scores = []
    for part in np.array_split(p, n_splits):
        marginal = part.mean(0, keepdims=True)
        kl = rel_entr(part, marginal).sum(1).mean()
        scores.append(math.exp(kl))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(model: FcnModel, samples, n_splits: int = 1):
    return inception_score_from_probs(predict_proba(model, samples), n_splits)


def eval_sample_count(test_size: int, minimum: int = 256) -> int:
    if test_size < 1:
        raise ValueError("test_size must be >= 1")
    return max(test_size, minimum)


def cas_class_counts(train_counts: Sequence[int], target: int = 1000) -> np.ndarray:
    """Per-class synthetic counts: the training counts, scaled up by a
    common factor when the training set is smaller than ``target``."""
    counts = np.asarray(train_counts, dtype=np.int64)
    total = int(counts.sum())
    if total >= target:
        return counts
    return -(-counts * target // total)  # ceil division


class ReplayGenerator:
    """Oracle generator that resamples real training series."""

    def __init__(self, ds: TimeSeriesDataset, conditional: bool = True):
        self.ds = ds
        self.conditional = conditional
        self.n_classes = ds.n_classes

    def sample(self, n: int, class_index: Optional[int] = None, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        pool = np.arange(len(self.ds))
        if class_index is not None:
            pool = pool[self.ds.labels == class_index]
        # cycle through the pool before repeating any series
        reps = -(-n // len(pool))
        idx = np.concatenate([rng.permutation(pool) for _ in range(reps)])[:n]
        return self.ds.samples[idx]


def cas(generator, ds_train: TimeSeriesDataset, ds_test: TimeSeriesDataset, runs: int = 5,
        target: int = 1000, fcn_epochs: int = 1000, seed: int = 0):
    """Train-on-synthetic, test-on-real accuracy over ``runs`` runs.

    Returns ``(mean, std, per_run_accuracies)``.
    """
    if not getattr(generator, "conditional", False):
        raise MetricError("CAS needs a class-conditional generator")
    counts = cas_class_counts(ds_train.class_counts(), target)
    accs = []
    for run in range(runs):
        xs, ys = [], []
        for c, n in enumerate(counts):
            if n == 0:
                continue
            xs.append(generator.sample(int(n), c, seed=seed * 1000 + run * 100 + c))
            ys.append(np.full(int(n), c))
        x, y = np.concatenate(xs), np.concatenate(ys)
        model = train_fcn((x, y), (ds_test.samples, ds_test.labels), n_classes=ds_train.n_classes,
                          epochs=fcn_epochs, seed=seed + run)
        accs.append(model.test_accuracy)
    return float(np.mean(accs)), float(np.std(accs)), accs


@dataclass
class MetricReport:
    dataset: str
    fid_mean: Optional[float] = None
    fid_std: Optional[float] = None
    is_mean: Optional[float] = None
    is_std: Optional[float] = None
    cas_mean: Optional[float] = None
    cas_std: Optional[float] = None
    n_real: int = 0
    n_gen: int = 0


RESULT_COLUMNS = [f.name for f in fields(MetricReport)]


def evaluate(generator, fcn: FcnModel, ds_train: TimeSeriesDataset, ds_test: TimeSeriesDataset,
             metrics: Iterable[str] = ("fid", "is", "cas"), runs: int = 3, cas_runs: int = 5,
             seed: int = 0, fcn_epochs: int = 1000, cas_generator=None) -> MetricReport:
    """Apply the sample-count protocol and compute the requested metrics.

    FID and IS use ``max(|test|, 256)`` unconditional samples per run and the
    test split as the real reference.  ``cas_generator`` overrides the
    generator used for CAS.
    """
    metrics = set(metrics)
    unknown = metrics - {"fid", "is", "cas"}
    if unknown:
        raise MetricError(f"unknown metrics {sorted(unknown)}")
    n_gen = eval_sample_count(len(ds_test))
    report = MetricReport(ds_test.name, n_real=len(ds_test), n_gen=n_gen)
    if metrics & {"fid", "is"}:
        feat_real = features(fcn, ds_test.samples)
        fids, iss = [], []
        for run in range(runs):
            x = generator.sample(n_gen, None, seed=seed + run)
            if "fid" in metrics:
                fids.append(fid(feat_real, features(fcn, x)))
            if "is" in metrics:
                iss.append(inception_score(fcn, x)[0])
        if fids:
            report.fid_mean, report.fid_std = float(np.mean(fids)), float(np.std(fids))
        if iss:
            report.is_mean, report.is_std = float(np.mean(iss)), float(np.std(iss))
    if "cas" in metrics:
        report.cas_mean, report.cas_std, _ = cas(cas_generator or generator, ds_train, ds_test, cas_runs,
                                                 fcn_epochs=fcn_epochs, seed=seed)
    return report


def write_results(path, reports: Sequence[MetricReport], append: bool = False):
    """Write reports as a comma-separated table (blank cells for skipped metrics)."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(RESULT_COLUMNS)
        for r in reports:
            w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in RESULT_COLUMNS])


def read_results(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        kw = {}
        for c in RESULT_COLUMNS:
            v = row[c]
            if c == "dataset":
                kw[c] = v
            elif c in ("n_real", "n_gen"):
                kw[c] = int(v)
            else:
                kw[c] = float(v) if v != "" else None
        out.append(MetricReport(**kw))
    return out
