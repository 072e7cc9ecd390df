"""Time-frequency transforms and the LF/HF band operators.

Spectrograms are carried as real tensors with a trailing ``(2, F, W)`` block:
channel 0 is the real part, channel 1 the imaginary part.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 8
    hop: Optional[int] = None
    lf_bins: int = 1
    window: str = "hann"  # or "boxcar"

    def __post_init__(self):
        if self.hop is None:
            object.__setattr__(self, "hop", max(1, self.n_fft // 4))
        if self.n_fft < 2:
            raise ValueError("n_fft must be >= 2")
        if not 1 <= self.hop <= self.n_fft:
            raise ValueError("hop must lie in [1, n_fft]")
        if not 1 <= self.lf_bins < self.freq_bins:
            raise ValueError(f"lf_bins must lie in [1, {self.freq_bins - 1}]")
        if self.window not in ("hann", "boxcar"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        # centered framing
        return length // self.hop + 1


@dataclass
class Spectrogram:
    data: torch.Tensor
    origin_length: int

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class SpectrogramPair:
    u_lf: Spectrogram
    u_hf: Spectrogram


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return torch.from_numpy(np.array(x, copy=True, order="C"))


def _window(cfg: StftConfig, ref: torch.Tensor) -> torch.Tensor:
    if cfg.window == "boxcar":
        return torch.ones(cfg.n_fft, dtype=ref.dtype, device=ref.device)
    return torch.hann_window(cfg.n_fft, dtype=ref.dtype, device=ref.device)


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Differentiable STFT of ``(..., L)`` real series to ``(..., 2, F, W)``."""
    length = x.shape[-1]
    if length < cfg.n_fft:
        raise ValueError(f"series length {length} is shorter than n_fft={cfg.n_fft}")
    lead = x.shape[:-1]
    spec = torch.stft(
        x.reshape(-1, length), n_fft=cfg.n_fft, hop_length=cfg.hop,
        window=_window(cfg, x), center=True, pad_mode="reflect",
        return_complex=True,
    )
    out = torch.stack([spec.real, spec.imag], dim=1)
    return out.reshape(*lead, 2, *out.shape[-2:])


def istft_tensor(u: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    """Inverse of :func:`stft_tensor`; returns ``(..., length)``."""
    lead = u.shape[:-3]
    flat = u.reshape(-1, *u.shape[-3:])
    spec = torch.complex(flat[:, 0], flat[:, 1])
    x = torch.istft(
        spec, n_fft=cfg.n_fft, hop_length=cfg.hop, window=_window(cfg, u),
        center=True, length=length,
    )
    return x.reshape(*lead, length)


def stft(x, cfg: StftConfig = StftConfig()) -> Spectrogram:
    x = _as_tensor(x)
    return Spectrogram(stft_tensor(x, cfg), origin_length=x.shape[-1])


def istft(u: Spectrogram, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    return istft_tensor(u.data, cfg, u.origin_length)


def band_mask(cfg: StftConfig, band: str, like: torch.Tensor) -> torch.Tensor:
    """``(F, 1)`` 0/1 mask keeping the rows of ``band`` ('lf', 'hf' or 'full')."""
    rows = torch.arange(cfg.freq_bins, device=like.device)
    if band == "lf":
        keep = rows < cfg.lf_bins
    elif band == "hf":
        keep = rows >= cfg.lf_bins
    elif band == "full":
        keep = torch.ones_like(rows, dtype=torch.bool)
    else:
        raise ValueError(f"unknown band {band!r}")
    return keep.to(like.dtype).unsqueeze(-1)


def pad_band(u: torch.Tensor, cfg: StftConfig, band: str) -> torch.Tensor:
    """Zero every frequency row outside ``band``."""
    return u * band_mask(cfg, band, u)


def band_split(u: Spectrogram, cfg: StftConfig = StftConfig()) -> SpectrogramPair:
    return SpectrogramPair(
        u_lf=Spectrogram(pad_band(u.data, cfg, "lf"), u.origin_length),
        u_hf=Spectrogram(pad_band(u.data, cfg, "hf"), u.origin_length),
    )


def length_match(y, target: int):
    """Resample the last axis onto ``target`` uniformly spaced points.

    End points are kept (grid-aligned linear interpolation).  Works on numpy
    arrays and on tensors of any leading shape.
    """
    is_numpy = not isinstance(y, torch.Tensor)
    t = _as_tensor(y)
    if t.shape[-1] < 2:
        raise ValueError("need at least 2 points to interpolate")
    if t.shape[-1] == target:
        out = t
    else:
        lead = t.shape[:-1]
        flat = t.reshape(1, -1, t.shape[-1])
        out = F.interpolate(flat, size=target, mode="linear", align_corners=True)
        out = out.reshape(*lead, target)
    return out.numpy() if is_numpy else out
