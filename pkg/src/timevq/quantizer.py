"""Codebooks, nearest-code quantization and the EMA codebook update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class TokenGrid:
    indices: torch.Tensor  # (..., H, W) or (..., W) long
    band: str = "lf"
    ndim: int = 2  # spatial rank of the grid

    def flatten(self) -> torch.Tensor:
        """Row-major (frequency-major, then time) sequence view."""
        return self.indices.flatten(start_dim=-self.ndim)


class Codebook(nn.Module):
    """K code vectors of dimension ``dim`` plus their EMA statistics.

    Codes live in a buffer: with EMA updates they never receive gradients.
    ``learnable=True`` switches to the pure-loss variant where ``codes`` is a
    parameter trained by the codebook term of the loss.
    """

    def __init__(self, K: int = 32, dim: int = 64, decay: float = 0.8, beta: float = 1.0,
                 eps: float = 1e-5, learnable: bool = False, init: Optional[torch.Tensor] = None):
        super().__init__()
        if K < 1:
            raise ValueError("codebook size K must be >= 1")
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        self.K, self.dim = K, dim
        self.decay, self.beta, self.eps = decay, beta, eps
        self.learnable = learnable
        codes = init.clone() if init is not None else torch.randn(K, dim)
        if codes.shape != (K, dim):
            raise ValueError(f"initial codes must have shape {(K, dim)}")
        if learnable:
            self.codes = nn.Parameter(codes)
        else:
            self.register_buffer("codes", codes)
        # unit pseudo-counts keep untouched codes at their initial value
        self.register_buffer("ema_cluster_size", torch.ones(K, dtype=codes.dtype))
        self.register_buffer("ema_embed_sum", codes.detach().clone())

    @property
    def use_ema(self) -> bool:
        return not self.learnable


def squared_distances(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances between rows of ``z`` (n, d) and codes (K, d)."""
    return (z.unsqueeze(1) - codes.unsqueeze(0)).pow(2).sum(-1)


def distances(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    return squared_distances(z, codes).sqrt()


def _to_rows(z: torch.Tensor, dim: int, batched: bool):
    axis = 1 if batched else 0
    if z.shape[axis] != dim:
        raise ValueError(f"code dimension {dim} does not match activation channels {z.shape[axis]}")
    moved = z.movedim(axis, -1)
    return moved.reshape(-1, dim), moved.shape[:-1]


def _from_rows(rows: torch.Tensor, grid_shape, batched: bool) -> torch.Tensor:
    out = rows.reshape(*grid_shape, rows.shape[-1])
    return out.movedim(-1, 1 if batched else 0)


def quantize(z: torch.Tensor, cb: Codebook, batched: Optional[bool] = None):
    """Replace every latent vector by its nearest code.

    ``z`` is ``(d, H, W)`` or batched ``(B, d, H, W)``; pass ``batched=True``
    for 1-D maps ``(B, d, W)``.  Ties go to the lowest code index.  Returns
    ``(z_q, TokenGrid)``.
    """
    if batched is None:
        batched = z.dim() == 4
    rows, grid_shape = _to_rows(z, cb.dim, batched)
    idx = torch.argmin(squared_distances(rows.detach(), cb.codes.detach().to(rows.dtype)), dim=1)
    zq = F.embedding(idx, cb.codes.to(rows.dtype))
    return _from_rows(zq, grid_shape, batched), _grid(idx, grid_shape, batched)


def _grid(idx, grid_shape, batched: bool) -> TokenGrid:
    return TokenGrid(idx.reshape(grid_shape), ndim=len(grid_shape) - int(batched))


def stochastic_sample(z: torch.Tensor, cb: Codebook, enabled: bool = True,
                      generator: Optional[torch.Generator] = None, batched: Optional[bool] = None):
    """Draw each token from softmax(-distance) over the codebook.

    With ``enabled=False`` this is exactly :func:`quantize`.
    """
    if not enabled:
        return quantize(z, cb, batched)
    if batched is None:
        batched = z.dim() == 4
    rows, grid_shape = _to_rows(z, cb.dim, batched)
    with torch.no_grad():
        probs = torch.softmax(-distances(rows, cb.codes.to(rows.dtype)), dim=1)
        idx = torch.multinomial(probs, 1, generator=generator).squeeze(1)
    zq = F.embedding(idx, cb.codes.to(rows.dtype))
    return _from_rows(zq, grid_shape, batched), _grid(idx, grid_shape, batched)


def lookup(indices: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Token grid ``(B, H, W)`` -> code map ``(B, d, H, W)``."""
    return F.embedding(indices, cb.codes).movedim(-1, 1)


def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; backward passes the gradient to ``z`` unchanged."""
    if z.shape != z_q.shape:
        raise ValueError("z and z_q must have the same shape")
    # z - z.detach() is exactly zero, so the forward value is z_q bit for bit
    return z_q.detach() + (z - z.detach())


def _sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # per-sample squared L2: sum over elements / batch size
    return (a - b).pow(2).sum() / a.shape[0]


def codebook_loss(z_lf, z_hf, zq_lf, zq_hf, beta: float = 1.0, ema: bool = False) -> torch.Tensor:
    """Codebook + commitment loss over both bands.

    Tensors are batched with the batch on axis 0.  Pass ``None`` for the HF
    pair in single-band models.  With ``ema=True`` the codebook terms are
    dropped (the EMA update moves the codes) and only commitment remains.
    """
    total = z_lf.new_zeros(())
    for z, zq in ((z_lf, zq_lf), (z_hf, zq_hf)):
        if z is None:
            continue
        if z.shape != zq.shape:
            raise ValueError("latent and quantized shapes differ")
        if not ema:
            total = total + _sq(z.detach(), zq)
        total = total + beta * _sq(z, zq.detach())
    return total


@torch.no_grad()
def ema_update(cb: Codebook, z: torch.Tensor, s: TokenGrid, batched: Optional[bool] = None) -> Codebook:
    """One exponential-moving-average step of the codebook, in place."""
    if batched is None:
        batched = z.dim() == 4
    rows, _ = _to_rows(z.detach(), cb.dim, batched)
    rows = rows.to(cb.ema_embed_sum.dtype)
    onehot = F.one_hot(s.indices.reshape(-1), cb.K).to(rows.dtype)
    counts = onehot.sum(0)
    sums = onehot.t() @ rows
    d = cb.decay
    cb.ema_cluster_size.mul_(d).add_(counts, alpha=1 - d)
    cb.ema_embed_sum.mul_(d).add_(sums, alpha=1 - d)
    new_codes = cb.ema_embed_sum / (cb.ema_cluster_size.unsqueeze(1) + cb.eps)
    cb.codes.data.copy_(new_codes.to(cb.codes.dtype))
    return cb


class VectorQuantizer(nn.Module):
    """Quantization step of an autoencoder band: nearest code, EMA update
    while training, straight-through output and the per-band commitment
    (plus codebook, for the pure-loss variant) loss."""

    def __init__(self, K: int, dim: int, decay: float = 0.8, beta: float = 1.0,
                 use_ema: bool = True):
        super().__init__()
        self.codebook = Codebook(K, dim, decay=decay, beta=beta, learnable=not use_ema)

    def forward(self, z: torch.Tensor):
        cb = self.codebook
        zq, grid = quantize(z, cb, batched=True)
        if self.training and cb.use_ema:
            ema_update(cb, z, grid, batched=True)
        loss = cb.beta * _sq(z, zq.detach())
        if not cb.use_ema:
            loss = loss + _sq(z.detach(), zq)
        return straight_through(z, zq), grid, loss
