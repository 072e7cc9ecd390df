"""Stage 1: per-band convolutional VQ autoencoders and their training loop.

Three layouts share one interface (``Stage1Config.mode``):

``split``  LF and HF branches over complementary zero-padded STFT copies.
``joint``  one branch over the unsplit spectrogram (no LF/HF separation).
``naive``  one 1-D branch over the raw series (no STFT).

Single-branch layouts keep their branch in the ``lf`` slot.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .dataset import TimeSeriesDataset, batches
from .quantizer import VectorQuantizer, lookup, quantize
from .tfr import StftConfig, istft_tensor, length_match, pad_band, stft_tensor

MODES = ("split", "joint", "naive")


class ConfigurationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncDecConfig:
    hidden_dim: int = 64
    n_resblocks: int = 4
    target_width: int = 8
    in_channels: int = 2

    def __post_init__(self):
        if self.hidden_dim < 1 or self.target_width < 1 or self.n_resblocks < 0:
            raise ConfigurationError(f"invalid encoder/decoder config: {self}")

    @classmethod
    def small(cls, target_width: int = 8, **kw):
        return cls(hidden_dim=32, n_resblocks=2, target_width=target_width, **kw)

    @classmethod
    def base(cls, target_width: int = 8, **kw):
        return cls(hidden_dim=64, n_resblocks=4, target_width=target_width, **kw)


def n_downsample(width: int, target_width: int) -> int:
    """Number of stride-2 layers bringing ``width`` closest to ``target_width``."""
    if width < 2:
        raise ConfigurationError("temporal width must be >= 2")
    n = max(0, round(math.log2(width / target_width)))
    while n > 0 and width >> n < 1:
        n -= 1
    return n


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 2000


@dataclass(frozen=True)
class Stage1Config:
    stft: StftConfig = field(default_factory=StftConfig)
    lf: EncDecConfig = field(default_factory=lambda: EncDecConfig.base(8))
    hf: EncDecConfig = field(default_factory=lambda: EncDecConfig.base(32))
    K: int = 32
    decay: float = 0.8
    beta: float = 1.0
    use_ema: bool = True
    mode: str = "split"
    hf_time_power: int = 2
    perceptual_loss: bool = False
    perceptual_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.hf_time_power not in (1, 2):
            raise ConfigurationError("hf_time_power must be 1 or 2")

    @property
    def bands(self) -> tuple:
        return ("lf", "hf") if self.mode == "split" else ("lf",)

    @classmethod
    def small(cls, **kw):
        return cls(lf=EncDecConfig.small(8), hf=EncDecConfig.small(32), **kw)

    @classmethod
    def naive(cls, **kw):
        """Time-domain VQ-VAE sized to match a two-branch Small model."""
        kw.setdefault("K", 64)
        kw.setdefault("lf", EncDecConfig(32, 4, 8, in_channels=1))
        return cls(mode="naive", **kw)

    @classmethod
    def joint(cls, **kw):
        """Time-frequency VQ-VAE without LF/HF separation."""
        kw.setdefault("K", 64)
        kw.setdefault("lf", EncDecConfig(32, 4, 8))
        return cls(mode="joint", **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        d = dict(d)
        d["stft"] = StftConfig(**d.get("stft", {}))
        for band in ("lf", "hf"):
            if band in d:
                d[band] = EncDecConfig(**d[band])
        return cls(**d)


_LAYERS = {
    1: (nn.Conv1d, nn.ConvTranspose1d, nn.BatchNorm1d, 4, 2, 1, 3),
    2: (nn.Conv2d, nn.ConvTranspose2d, nn.BatchNorm2d, (3, 4), (1, 2), (1, 1), (3, 3)),
}


class ResBlock(nn.Module):
    def __init__(self, ch: int, nd: int = 2):
        super().__init__()
        conv, _, bn, *_ = _LAYERS[nd]
        self.body = nn.Sequential(
            nn.LeakyReLU(0.01),
            conv(ch, ch, 3, 1, 1),
            bn(ch),
            nn.LeakyReLU(0.01),
            conv(ch, ch, 3, 1, 1),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """``n`` temporal-only stride-2 blocks, residual blocks, 1x1 projection to
    the code dimension."""

    def __init__(self, cfg: EncDecConfig, n_down: int, nd: int = 2):
        super().__init__()
        conv, _, bn, k, s, p, _ = _LAYERS[nd]
        h = cfg.hidden_dim
        layers = []
        ch = cfg.in_channels
        for _ in range(n_down):
            layers += [conv(ch, h, k, s, p), bn(h), nn.LeakyReLU(0.01)]
            ch = h
        if n_down == 0:
            layers.append(conv(ch, h, 3, 1, 1))
        layers += [ResBlock(h, nd) for _ in range(cfg.n_resblocks)]
        layers.append(conv(h, h, 1))
        self.net = nn.Sequential(*layers)
        self.n_down = n_down

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """1x1 projection, residual blocks, ``n`` stride-2 transposed blocks, one
    extra transposed layer to the output channels and linear resampling to
    the exact input width."""

    def __init__(self, cfg: EncDecConfig, n_down: int, out_width: int, nd: int = 2):
        super().__init__()
        conv, convt, bn, k, s, p, _ = _LAYERS[nd]
        h = cfg.hidden_dim
        layers = [conv(h, h, 1)]
        layers += [ResBlock(h, nd) for _ in range(cfg.n_resblocks)]
        if cfg.n_resblocks:
            layers.append(nn.LeakyReLU(0.01))
        for _ in range(n_down):
            layers += [convt(h, h, k, s, p), bn(h), nn.LeakyReLU(0.01)]
        layers.append(convt(h, cfg.in_channels, k, s, p))
        self.net = nn.Sequential(*layers)
        self.out_width = out_width

    def forward(self, z):
        return length_match(self.net(z), self.out_width)


class BandBranch(nn.Module):
    """Encoder, quantizer and decoder for one band of one input length."""

    def __init__(self, cfg: EncDecConfig, stft: StftConfig, band: str, length: int,
                 K: int, decay: float, beta: float, use_ema: bool):
        super().__init__()
        self.band, self.stft, self.length = band, stft, length
        self.time_domain = band == "time"
        nd = 1 if self.time_domain else 2
        width = length if self.time_domain else stft.n_frames(length)
        n = n_downsample(width, cfg.target_width)
        self.encoder = Encoder(cfg, n, nd)
        self.decoder = Decoder(cfg, n, width, nd)
        self.quantizer = VectorQuantizer(K, cfg.hidden_dim, decay, beta, use_ema)
        self.width = width

    @property
    def codebook(self):
        return self.quantizer.codebook

    def band_input(self, x: torch.Tensor, u: Optional[torch.Tensor]) -> torch.Tensor:
        if self.time_domain:
            return x.unsqueeze(1)
        return pad_band(u, self.stft, self.band)

    def encode(self, inp: torch.Tensor) -> torch.Tensor:
        return self.encoder(inp)

    def decode(self, zq: torch.Tensor):
        """Code map -> (reconstruction in the model domain, series)."""
        out = self.decoder(zq)
        if self.time_domain:
            x_hat = out.squeeze(1)
            return x_hat, x_hat
        u_hat = pad_band(out, self.stft, self.band)
        return u_hat, istft_tensor(u_hat, self.stft, self.length)

    def latent_shape(self, batch: int = 1) -> tuple:
        with torch.no_grad():
            ref = next(self.parameters())
            if self.time_domain:
                dummy = torch.zeros(batch, 1, self.length, dtype=ref.dtype)
            else:
                dummy = torch.zeros(batch, 2, self.stft.freq_bins, self.width, dtype=ref.dtype)
            was = self.encoder.training
            self.encoder.eval()
            shape = tuple(self.encoder(dummy).shape)
            self.encoder.train(was)
        return shape

    @torch.no_grad()
    def tokens_to_series(self, tokens: torch.Tensor) -> torch.Tensor:
        """Flattened token sequences ``(B, N)`` -> series ``(B, L)``."""
        _, _, *grid = self.latent_shape()
        zq = lookup(tokens.reshape(tokens.shape[0], *grid), self.codebook)
        return self.decode(zq)[1]


@dataclass
class Stage1Losses:
    recons_time_lf: float = 0.0
    recons_time_hf: float = 0.0
    recons_tf_lf: float = 0.0
    recons_tf_hf: float = 0.0
    codebook: float = 0.0
    perceptual: float = 0.0
    total: float = 0.0

    def items(self):
        # not asdict: that deep-copies, which non-leaf tensors refuse
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def as_floats(self) -> "Stage1Losses":
        return Stage1Losses(**{k: float(v.detach()) if torch.is_tensor(v) else float(v)
                               for k, v in self.items()})


def _sq(a, b):
    return (a - b).pow(2).sum() / a.shape[0]


def _norm(a, b):
    return (a - b).flatten(1).norm(dim=1).mean()


def reconstruction_terms(x, x_hat_lf, x_hat_hf, u_lf, u_hf, uhat_lf, uhat_hf,
                         stft: StftConfig = StftConfig(), hf_time_power: int = 2) -> dict:
    """The four time / time-frequency reconstruction terms.

    Targets in the time domain are the inverse transforms of the padded
    ground-truth spectrograms.  ``hf_time_power=1`` uses an unsquared norm for
    the HF time term.
    """
    length = x.shape[-1]
    x_lf = istft_tensor(u_lf, stft, length)
    x_hf = istft_tensor(u_hf, stft, length)
    hf_time = _sq(x_hf, x_hat_hf) if hf_time_power == 2 else _norm(x_hf, x_hat_hf)
    return {
        "recons_time_lf": _sq(x_lf, x_hat_lf),
        "recons_time_hf": hf_time,
        "recons_tf_lf": _sq(u_lf, uhat_lf),
        "recons_tf_hf": _sq(u_hf, uhat_hf),
    }


def reconstruction_loss(x, x_hat_lf, x_hat_hf, u_lf, u_hf, uhat_lf, uhat_hf,
                        stft: StftConfig = StftConfig(), hf_time_power: int = 2) -> torch.Tensor:
    terms = reconstruction_terms(x, x_hat_lf, x_hat_hf, u_lf, u_hf, uhat_lf, uhat_hf,
                                 stft, hf_time_power)
    return sum(terms.values())


def _features(fcn, x):
    if hasattr(fcn, "features"):
        return fcn.features(x)
    return fcn(x)


def perceptual_loss(x, x_hat, fcn) -> torch.Tensor:
    """Squared distance between pretrained-classifier features of ``x`` and
    ``x_hat`` (per-sample sum, averaged over the batch)."""
    if fcn is None:
        raise ConfigurationError("perceptual loss needs a pretrained FCN")
    with torch.no_grad():
        target = _features(fcn, x)
    return _sq(_features(fcn, x_hat), target)


class Stage1Model(nn.Module):
    def __init__(self, cfg: Stage1Config, length: int):
        super().__init__()
        self.cfg, self.length = cfg, length
        if cfg.mode != "naive" and length < cfg.stft.n_fft:
            raise ConfigurationError(f"series length {length} < n_fft {cfg.stft.n_fft}")
        names = {"split": ("lf", "hf"), "joint": ("full",), "naive": ("time",)}[cfg.mode]
        common = dict(stft=cfg.stft, length=length, K=cfg.K, decay=cfg.decay,
                      beta=cfg.beta, use_ema=cfg.use_ema)
        self.lf = BandBranch(cfg.lf, band=names[0], **common)
        self.hf = BandBranch(cfg.hf, band="hf", **common) if cfg.mode == "split" else None
        self.fcn = None

    def branches(self):
        return [b for b in (self.lf, self.hf) if b is not None]

    def spectrogram(self, x):
        return None if self.cfg.mode == "naive" else stft_tensor(x, self.cfg.stft)

    def forward(self, x: torch.Tensor):
        """Full stage-1 pass on a batch ``(B, L)``; returns (losses, x_hat)."""
        cfg = self.cfg
        u = self.spectrogram(x)
        outs, vq_loss = [], 0.0
        for br in self.branches():
            inp = br.band_input(x, u)
            z_st, _, loss = br.quantizer(br.encode(inp))
            rec, x_hat = br.decode(z_st)
            outs.append((inp, rec, x_hat))
            vq_loss = vq_loss + loss
        # per-branch codebook + commitment terms; same value as codebook_loss()
        # but with gradient reaching learnable codes
        losses = {"codebook": vq_loss}
        if cfg.mode == "split":
            (u_lf, uh_lf, xh_lf), (u_hf, uh_hf, xh_hf) = outs
            losses.update(reconstruction_terms(x, xh_lf, xh_hf, u_lf, u_hf, uh_lf, uh_hf,
                                               cfg.stft, cfg.hf_time_power))
            x_hat = xh_lf + xh_hf
        else:
            inp, rec, x_hat = outs[0]
            if cfg.mode == "naive":
                losses["recons_time_lf"] = _sq(x, x_hat)
            else:
                losses["recons_time_lf"] = _sq(istft_tensor(inp, cfg.stft, self.length), x_hat)
                losses["recons_tf_lf"] = _sq(inp, rec)
        if cfg.perceptual_loss:
            losses["perceptual"] = cfg.perceptual_weight * perceptual_loss(x, x_hat, self.fcn)
        total = sum(losses.values())
        return Stage1Losses(total=total, **losses), x_hat

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        was = self.training
        self.eval()
        _, x_hat = self.forward(x)
        self.train(was)
        return x_hat

    @torch.no_grad()
    def latents(self, x: torch.Tensor) -> list:
        """Continuous encoder outputs per branch (eval mode)."""
        was = self.training
        self.eval()
        u = self.spectrogram(x)
        out = [br.encode(br.band_input(x, u)) for br in self.branches()]
        self.train(was)
        return out

    @torch.no_grad()
    def tokenize(self, x: torch.Tensor) -> list:
        """Deterministic token grids per branch."""
        return [quantize(z, br.codebook, batched=True)[1]
                for z, br in zip(self.latents(x), self.branches())]

    @torch.no_grad()
    def decode_tokens(self, tokens: list) -> torch.Tensor:
        """Per-branch flattened token sequences -> summed series ``(B, L)``."""
        was = self.training
        self.eval()
        x = sum(br.tokens_to_series(t) for br, t in zip(self.branches(), tokens))
        self.train(was)
        return x


def _check_finite(losses: Stage1Losses, epoch: int, step: int):
    bad = {k: float(v) for k, v in losses.as_floats().items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite stage-1 loss at epoch {epoch}, step {step}: {bad}")


def make_optimizer(params, opt: OptimConfig, total_steps: int):
    optimizer = torch.optim.AdamW(params, lr=opt.lr, weight_decay=opt.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, total_steps))
    return optimizer, sched


def train_stage1(ds: TimeSeriesDataset, cfg: Stage1Config = Stage1Config(),
                 opt: OptimConfig = OptimConfig(), seed: int = 0, fcn=None,
                 model: Optional[Stage1Model] = None, state: Optional[dict] = None,
                 epochs: Optional[int] = None,
                 callback: Optional[Callable[[int, Stage1Losses], None]] = None):
    """Train the stage-1 autoencoder(s).

    ``state`` (optimizer/scheduler state dicts and the epoch counter, as
    produced by a previous call) resumes an interrupted run; ``epochs`` runs
    only that many epochs of the ``opt.max_epochs`` schedule.  Returns
    ``(model, history, state)``.
    """
    if cfg.perceptual_loss and fcn is None:
        raise ConfigurationError("perceptual_loss is enabled but no FCN was given")
    if model is None:
        torch.manual_seed(seed)
        model = Stage1Model(cfg, ds.length)
    model.fcn = fcn
    if fcn is not None:
        fcn.eval()
        for p in fcn.parameters():
            p.requires_grad_(False)
    steps_per_epoch = math.ceil(len(ds) / opt.batch_size)
    optimizer, sched = make_optimizer(model.parameters(), opt, opt.max_epochs * steps_per_epoch)
    start = 0
    if state is not None:
        optimizer.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        start = state["epoch"]
    stop = opt.max_epochs if epochs is None else min(opt.max_epochs, start + epochs)
    dtype = next(model.parameters()).dtype
    history = []
    model.train()
    for epoch in range(start, stop):
        sums, count = None, 0
        for step, (xb, _) in enumerate(batches(ds, opt.batch_size, shuffle=True, seed=seed, epoch=epoch)):
            x = torch.tensor(xb, dtype=dtype)
            losses, _ = model(x)
            _check_finite(losses, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            optimizer.step()
            sched.step()
            vals = np.array([v for _, v in losses.as_floats().items()]) * len(xb)
            sums = vals if sums is None else sums + vals
            count += len(xb)
        record = Stage1Losses(*(sums / count))
        history.append(record)
        if callback is not None:
            callback(epoch, record)
    model.eval()
    state = {"optimizer": optimizer.state_dict(), "scheduler": sched.state_dict(), "epoch": stop}
    return model, history, state
