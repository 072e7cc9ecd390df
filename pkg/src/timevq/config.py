"""Run configuration: a strict YAML schema mapped onto nested dataclasses.

Every key is optional; unknown keys are rejected.  Example::

    dataset: ECG200
    seed: 0
    stft: {n_fft: 8, lf_bins: 1}
    stage1:
      size: small          # small | base; explicit lf/hf blocks override
      K: 32
      optim: {max_epochs: 2000, batch_size: 128}
    stage2:
      size: small
      optim: {max_epochs: 10000, batch_size: 256}
    sampler: {T: 10, guidance_scale: 1.0}
    ablation: {naive_vqvae: false, band_separation: true, perceptual_loss: false}
"""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .autoencoder import ConfigurationError, EncDecConfig, OptimConfig, Stage1Config
from .prior import PriorConfig
from .tfr import StftConfig


@dataclass
class OptimSection:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 2000

    def build(self) -> OptimConfig:
        return OptimConfig(self.lr, self.weight_decay, self.batch_size, self.max_epochs)


@dataclass
class BandSection:
    hidden_dim: Optional[int] = None
    n_resblocks: Optional[int] = None
    target_width: Optional[int] = None


@dataclass
class StftSection:
    n_fft: int = 8
    hop: Optional[int] = None
    lf_bins: int = 1
    window: str = "hann"


@dataclass
class Stage1Section:
    size: str = "base"
    lf: BandSection = field(default_factory=BandSection)
    hf: BandSection = field(default_factory=BandSection)
    K: Optional[int] = None
    decay: float = 0.8
    beta: float = 1.0
    use_ema: bool = True
    hf_time_power: int = 2
    perceptual_weight: float = 1.0
    optim: OptimSection = field(default_factory=OptimSection)


@dataclass
class Stage2Section:
    size: str = "base"
    hidden: Optional[int] = None
    layers: Optional[int] = None
    heads: Optional[int] = None
    ff_ratio: Optional[float] = None
    p_uncond: float = 0.2
    stochastic: bool = True
    optim: OptimSection = field(default_factory=lambda: OptimSection(batch_size=256, max_epochs=10000))


@dataclass
class SamplerSection:
    T: int = 10
    guidance_scale: float = 1.0
    temperature0: float = 1.0
    greedy: bool = False


@dataclass
class FcnSection:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-5


@dataclass
class EvaluationSection:
    runs: int = 3
    cas_runs: int = 5


@dataclass
class AblationSection:
    naive_vqvae: bool = False
    band_separation: bool = True
    perceptual_loss: bool = False


@dataclass
class RunConfig:
    dataset: str = "ECG200"
    data_dir: Optional[str] = None
    seed: int = 0
    stft: StftSection = field(default_factory=StftSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    fcn: FcnSection = field(default_factory=FcnSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self):
        ab = self.ablation
        if ab.naive_vqvae and ab.band_separation:
            # naive VQ-VAE has no spectrogram to split
            ab.band_separation = False
        for name in ("stage1", "stage2"):
            size = getattr(self, name).size
            if size not in ("small", "base"):
                raise ConfigurationError(f"{name}.size must be 'small' or 'base', got {size!r}")
        return self

    def stage1_config(self) -> Stage1Config:
        s, ab = self.stage1, self.ablation
        stft = StftConfig(self.stft.n_fft, self.stft.hop, self.stft.lf_bins, self.stft.window)
        common = dict(stft=stft, decay=s.decay, beta=s.beta, use_ema=s.use_ema,
                      hf_time_power=s.hf_time_power, perceptual_loss=ab.perceptual_loss,
                      perceptual_weight=s.perceptual_weight)
        if s.K is not None:
            common["K"] = s.K
        if ab.naive_vqvae:
            base = Stage1Config.naive(**common)
        elif not ab.band_separation:
            base = Stage1Config.joint(**common)
        else:
            preset = EncDecConfig.small if s.size == "small" else EncDecConfig.base
            base = Stage1Config(lf=preset(8), hf=preset(32), **common)
        lf = _override(base.lf, s.lf)
        hf = _override(base.hf, s.hf)
        return Stage1Config(**{**asdict_shallow(base), "lf": lf, "hf": hf})

    def prior_config(self, n_classes: int) -> PriorConfig:
        s = self.stage2
        preset = PriorConfig.small if s.size == "small" else PriorConfig.base
        over = {k: getattr(s, k) for k in ("hidden", "layers", "heads", "ff_ratio")
                if getattr(s, k) is not None}
        return preset(K=self.stage1_config().K, n_classes=n_classes, p_uncond=s.p_uncond, **over)

    def to_dict(self) -> dict:
        return asdict(self)


def asdict_shallow(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _override(cfg: EncDecConfig, sec: BandSection) -> EncDecConfig:
    kw = {k: v for k, v in asdict(sec).items() if v is not None}
    return EncDecConfig(**{**asdict(cfg), **kw})


def _build(cls, data, path: str = ""):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {sorted(unknown)} in {path or 'top level'}")
    kw = {}
    for key, value in data.items():
        hint = hints[key]
        if is_dataclass(hint):
            kw[key] = _build(hint, value, f"{path}{key}.")
        else:
            kw[key] = value
    return cls(**kw)


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    data.update(overrides or {})
    return _build(RunConfig, data).validate()


def save_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable (or dataclass) object."""
    if is_dataclass(obj):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stage1_hash(cfg: RunConfig) -> str:
    return config_hash({"dataset": cfg.dataset, "seed": cfg.seed,
                        "model": cfg.stage1_config().to_dict(), "optim": asdict(cfg.stage1.optim)})


def stage2_hash(cfg: RunConfig, n_classes: int) -> str:
    return config_hash({"stage1": stage1_hash(cfg), "prior": asdict(cfg.prior_config(n_classes)),
                        "optim": asdict(cfg.stage2.optim), "stochastic": cfg.stage2.stochastic})
