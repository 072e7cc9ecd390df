"""End-to-end runs: training, persistence, generation and evaluation.

These functions back the command-line interface and are usable directly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ck
from .autoencoder import ConfigurationError, Stage1Config, Stage1Model, train_stage1
from .config import RunConfig, stage1_hash, stage2_hash
from .dataset import TimeSeriesDataset, load_ucr_dataset
from .fcnmetrics import (FcnModel, MetricReport, ReplayGenerator, evaluate, train_fcn,
                         write_results)
from .prior import PriorConfig, Stage2Model, train_stage2
from .sampler import GenerationRequest, VQGenerator, check_compatible, generate

log = logging.getLogger(__name__)


class CompatibilityError(ConfigurationError):
    pass


def load_data(cfg: RunConfig, data_dir=None):
    return load_ucr_dataset(cfg.dataset, data_dir or cfg.data_dir)


# -- persistence ------------------------------------------------------------

def _state_tensors(state: Optional[dict]):
    if state is None:
        return {}, None
    tensors, rest = ck.flatten_optimizer(state["optimizer"])
    return tensors, {"optimizer": rest, "scheduler": state["scheduler"], "epoch": state["epoch"]}


def _state_from(c: ck.Checkpoint) -> Optional[dict]:
    rest = c.config.get("train_state")
    if rest is None:
        return None
    return {"optimizer": ck.unflatten_optimizer(c.tensors, rest["optimizer"]),
            "scheduler": rest["scheduler"], "epoch": rest["epoch"]}


def save_stage1(path, model: Stage1Model, run: RunConfig, ds: TimeSeriesDataset,
                state: Optional[dict] = None) -> Path:
    opt_tensors, rest = _state_tensors(state)
    config = {"run": run.to_dict(), "stage1": model.cfg.to_dict(), "length": model.length,
              "mean": ds.mean, "std": ds.std, "n_classes": ds.n_classes, "dataset": ds.name,
              "train_state": rest}
    tensors = {**ck.module_tensors(model), **opt_tensors}
    return ck.save_checkpoint(path, ck.Checkpoint("stage1", config, stage1_hash(run), tensors))


def load_stage1(path):
    """Returns ``(model, checkpoint)``; ``checkpoint.config`` holds the metadata."""
    c = ck.read_checkpoint(path, "stage1")
    model = Stage1Model(Stage1Config.from_dict(c.config["stage1"]), c.config["length"])
    ck.load_module(model, c.tensors)
    model.eval()
    return model, c


def save_stage2(path, model: Stage2Model, run: RunConfig, stage1_ckpt: ck.Checkpoint,
                state: Optional[dict] = None) -> Path:
    opt_tensors, rest = _state_tensors(state)
    config = {"run": run.to_dict(), "prior": asdict(model.cfg), "stage1_hash": stage1_ckpt.config_hash,
              "lf_len": model.lf.seq_len, "hf_len": None if model.hf is None else model.hf.seq_len,
              "code_dims": list(model.code_dims),
              "train_state": rest}
    tensors = {**ck.module_tensors(model), **opt_tensors}
    h = stage2_hash(run, model.cfg.n_classes)
    return ck.save_checkpoint(path, ck.Checkpoint("stage2", config, h, tensors))


def load_stage2(path):
    c = ck.read_checkpoint(path, "stage2")
    model = Stage2Model(PriorConfig(**c.config["prior"]), c.config["lf_len"], c.config["hf_len"],
                        code_dims=tuple(c.config["code_dims"]))
    ck.load_module(model, c.tensors)
    model.eval()
    return model, c


def save_fcn(path, model: FcnModel, ds: TimeSeriesDataset) -> Path:
    config = {"n_classes": model.n_classes, "length": ds.length, "dataset": ds.name,
              "test_accuracy": model.test_accuracy}
    return ck.save_checkpoint(path, ck.Checkpoint("fcn", config, "", ck.module_tensors(model)))


def load_fcn(path) -> FcnModel:
    c = ck.read_checkpoint(path, "fcn")
    model = FcnModel(c.config["n_classes"])
    ck.load_module(model, c.tensors)
    model.test_accuracy = c.config.get("test_accuracy")
    model.eval()
    return model


def load_pair(stage1_path, stage2_path):
    s1, c1 = load_stage1(stage1_path)
    s2, c2 = load_stage2(stage2_path)
    if c2.config["stage1_hash"] != c1.config_hash:
        raise CompatibilityError(
            f"stage-2 checkpoint was trained on stage-1 {c2.config['stage1_hash']}, "
            f"but {stage1_path} has hash {c1.config_hash}")
    check_compatible(s1, s2)
    return s1, c1, s2, c2


# -- loss logs --------------------------------------------------------------

def _write_log(path: Path, rows: list, start_epoch: int, append: bool):
    if not rows:
        return
    keys = list(rows[0].keys())
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", *keys])
        for i, row in enumerate(rows):
            w.writerow([start_epoch + i + 1, *(f"{row[k]:.10g}" for k in keys)])


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- runs -------------------------------------------------------------------

def run_train_fcn(cfg: RunConfig, out_dir, data_dir=None) -> Path:
    train, test = load_data(cfg, data_dir)
    f = cfg.fcn
    model = train_fcn(train, test, n_classes=train.n_classes, epochs=f.epochs,
                      batch_size=f.batch_size, lr=f.lr, weight_decay=f.weight_decay, seed=cfg.seed)
    log.info("FCN test accuracy on %s: %.4f", cfg.dataset, model.test_accuracy)
    return save_fcn(Path(out_dir) / "fcn.ckpt", model, train)


def run_train_stage1(cfg: RunConfig, out_dir, data_dir=None, resume: bool = False,
                     epochs: Optional[int] = None, fcn_path=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, _ = load_data(cfg, data_dir)
    path = out_dir / "stage1.ckpt"
    model = state = None
    if resume:
        model, c = load_stage1(path)
        expected = stage1_hash(cfg)
        if c.config_hash != expected:
            raise CompatibilityError(f"cannot resume: checkpoint hash {c.config_hash} != config hash {expected}")
        state = _state_from(c)
        model.train()
    fcn = None
    if cfg.ablation.perceptual_loss:
        if fcn_path is None:
            raise ConfigurationError("perceptual_loss needs a pretrained FCN (--fcn)")
        fcn = load_fcn(fcn_path)
    model, history, state = train_stage1(
        train, cfg.stage1_config(), cfg.stage1.optim.build(), seed=cfg.seed, fcn=fcn,
        model=model, state=state, epochs=epochs)
    start = state["epoch"] - len(history)
    _write_log(out_dir / "losses.csv", [asdict(h) for h in history], start, append=resume)
    return save_stage1(path, model, cfg, train, state)


def run_train_stage2(cfg: RunConfig, out_dir, stage1_path, data_dir=None, resume: bool = False,
                     epochs: Optional[int] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, _ = load_data(cfg, data_dir)
    stage1, c1 = load_stage1(stage1_path)
    expected = stage1_hash(cfg)
    if c1.config_hash != expected:
        raise CompatibilityError(
            f"stage-1 checkpoint hash {c1.config_hash} does not match the configured stage-1 hash {expected}")
    pcfg = cfg.prior_config(train.n_classes)
    path = out_dir / "stage2.ckpt"
    model = state = None
    if resume:
        model, c2 = load_stage2(path)
        state = _state_from(c2)
    model, history, state = train_stage2(
        train, stage1, pcfg, cfg.stage2.optim.build(), seed=cfg.seed,
        stochastic=cfg.stage2.stochastic, model=model, state=state, epochs=epochs)
    start = state["epoch"] - len(history)
    _write_log(out_dir / "losses_stage2.csv", history, start, append=resume)
    return save_stage2(path, model, cfg, c1, state)


def write_series(path, x: np.ndarray, labels: Sequence[int], header: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        for lab, row in zip(labels, x):
            fh.write("\t".join([str(int(lab))] + [f"{v:.8g}" for v in row]) + "\n")
    return path


def run_generate(stage1_path, stage2_path, n: int, out_path, class_index: Optional[int] = None,
                 guidance_scale: float = 1.0, seed: int = 0, T: int = 10,
                 temperature0: float = 1.0, greedy: bool = False, denormalize: bool = False,
                 npy_path=None) -> Path:
    s1, c1, s2, _ = load_pair(stage1_path, stage2_path)
    req = GenerationRequest(n, class_index, guidance_scale, seed, T, temperature0, greedy, denormalize)
    x = generate(req, s1, s2, mean=c1.config["mean"], std=c1.config["std"])
    label = -1 if class_index is None else class_index
    header = {"class_index": label, "guidance_scale": guidance_scale, "seed": seed, "T": T,
              "n_samples": n, "denormalized": denormalize}
    if npy_path is not None:
        np.save(npy_path, x)
    return write_series(out_path, x, [label] * n, header)


def run_evaluate(cfg: RunConfig, out_path, stage1_path=None, stage2_path=None, fcn_path=None,
                 train_fcn_if_missing: bool = False, metrics=("fid", "is", "cas"),
                 replay: bool = False, data_dir=None, append: bool = False) -> MetricReport:
    train, test = load_data(cfg, data_dir)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    if fcn_path is not None and Path(fcn_path).exists():
        fcn = load_fcn(fcn_path)
    elif train_fcn_if_missing:
        f = cfg.fcn
        fcn = train_fcn(train, test, n_classes=train.n_classes, epochs=f.epochs,
                        batch_size=f.batch_size, lr=f.lr, weight_decay=f.weight_decay, seed=cfg.seed)
        if fcn_path is not None:
            save_fcn(fcn_path, fcn, train)
    else:
        raise ConfigurationError("no pretrained FCN: pass --fcn PATH to an existing model or --train-fcn")
    cas_gen = None
    if replay:
        # FID/IS replay the reference split itself; CAS must train on train data
        gen, cas_gen = ReplayGenerator(test), ReplayGenerator(train)
    else:
        if stage1_path is None or stage2_path is None:
            raise ConfigurationError("evaluate needs --stage1 and --stage2 (or --replay)")
        s1, _, s2, _ = load_pair(stage1_path, stage2_path)
        sm = cfg.sampler
        gen = VQGenerator(s1, s2, sm.guidance_scale, sm.T, sm.temperature0)
    report = evaluate(gen, fcn, train, test, metrics, runs=cfg.evaluation.runs,
                      cas_runs=cfg.evaluation.cas_runs, seed=cfg.seed, fcn_epochs=cfg.fcn.epochs,
                      cas_generator=cas_gen)
    report.dataset = cfg.dataset
    write_results(out_path, [report], append=append)
    return report


ABLATION_VARIANTS = {
    "timevq": {},
    "naive_vqvae": {"naive_vqvae": True, "band_separation": False},
    "no_separation": {"band_separation": False},
    "perceptual_loss": {"perceptual_loss": True},
}


def run_ablate(cfg: RunConfig, out_dir, variants: Sequence[str] = ("timevq", "naive_vqvae"),
               data_dir=None, metrics=("fid", "is")) -> list:
    """Train and evaluate each ablation variant; one results row per variant."""
    from copy import deepcopy

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigurationError(f"unknown ablation variant(s) {unknown}")
    fcn_path = out_dir / "fcn.ckpt"
    if not fcn_path.exists():
        run_train_fcn(cfg, out_dir, data_dir)
    reports = []
    for name in variants:
        vcfg = deepcopy(cfg)
        for k, v in ABLATION_VARIANTS[name].items():
            setattr(vcfg.ablation, k, v)
        vcfg.validate()
        vdir = out_dir / name
        s1 = run_train_stage1(vcfg, vdir, data_dir, fcn_path=fcn_path)
        s2 = run_train_stage2(vcfg, vdir, s1, data_dir)
        rep = run_evaluate(vcfg, vdir / "results.csv", s1, s2, fcn_path, metrics=metrics,
                           data_dir=data_dir)
        rep.dataset = f"{cfg.dataset}:{name}"
        reports.append(rep)
    write_results(out_dir / "ablation.csv", reports)
    return reports


def read_series(path):
    """Read a UCR-format file as ``(samples, labels)`` without remapping labels
    (keeps the -1 marker of unconditional samples)."""
    rows, labels = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            f = line.replace(",", " ").split()
            labels.append(int(float(f[0])))
            rows.append([float(v) for v in f[1:]])
    return np.asarray(rows), np.asarray(labels)
