"""Stage 2: bidirectional transformer priors over LF and HF token sequences."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import OptimConfig, Stage1Model, TrainingError, make_optimizer
from .dataset import TimeSeriesDataset, epoch_order
from .quantizer import stochastic_sample


@dataclass(frozen=True)
class PriorConfig:
    hidden: int = 256
    layers: int = 4
    heads: int = 2
    ff_ratio: float = 1.0
    K: int = 32
    n_classes: int = 1
    p_uncond: float = 0.2

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")

    @property
    def vocab(self) -> int:
        return self.K + 1

    @property
    def mask_id(self) -> int:
        return self.K

    @property
    def null_class(self) -> int:
        return self.n_classes

    @classmethod
    def small(cls, **kw):
        return cls(hidden=64, layers=2, heads=2, ff_ratio=1.0, **kw)

    @classmethod
    def base(cls, **kw):
        return cls(hidden=256, layers=4, heads=2, ff_ratio=1.0, **kw)


@dataclass(frozen=True)
class Stage2OptimConfig(OptimConfig):
    batch_size: int = 256
    max_epochs: int = 10000


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def normalize(self, x):
        # eps on the RMS itself keeps the relative error at eps / rms
        return x / (x.pow(2).mean(-1, keepdim=True).sqrt() + self.eps)

    def forward(self, x):
        return self.normalize(x) * self.gain


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        # no attention mask: every position sees every other
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ff_ratio: float):
        super().__init__()
        inner = max(1, int(round(dim * ff_ratio)))
        self.norm1 = RMSNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = RMSNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, inner), nn.GELU(), nn.Linear(inner, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class TokenEmbedding(nn.Module):
    """Code-vector lookup (frozen, from the stage-1 codebook) plus a learned
    MASK vector, projected to the transformer width."""

    def __init__(self, codes: torch.Tensor, hidden: int):
        super().__init__()
        self.register_buffer("codes", codes.detach().clone())
        self.mask = nn.Parameter(torch.randn(1, codes.shape[1]) * 0.02)
        self.proj = nn.Linear(codes.shape[1], hidden)

    def forward(self, tokens):
        table = torch.cat([self.codes, self.mask], dim=0)
        return self.proj(F.embedding(tokens, table))


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)


class _Transformer(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.cfg = cfg
        self.class_emb = nn.Embedding(cfg.n_classes + 1, cfg.hidden)
        self.blocks = nn.ModuleList(Block(cfg.hidden, cfg.heads, cfg.ff_ratio) for _ in range(cfg.layers))
        self.norm = RMSNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.K)

    def _class_slot(self, class_token, batch: int, device):
        if class_token is None:
            class_token = self.cfg.null_class
        c = torch.as_tensor(class_token, device=device, dtype=torch.long)
        if c.dim() == 0:
            c = c.expand(batch)
        return self.class_emb(c).unsqueeze(1)

    def _run(self, h):
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.norm(h))


class LFPrior(_Transformer):
    """p(s_lf | masked s_lf, class)."""

    def __init__(self, cfg: PriorConfig, seq_len: int, codes: Optional[torch.Tensor] = None,
                 code_dim: int = 64):
        super().__init__(cfg)
        self.seq_len = seq_len
        if codes is None:
            codes = torch.randn(cfg.K, code_dim)
        self.tok_emb = TokenEmbedding(codes, cfg.hidden)
        self.pos_emb = nn.Parameter(torch.zeros(seq_len + 1, cfg.hidden))
        _init_weights(self)
        nn.init.normal_(self.pos_emb, std=0.02)

    def forward(self, s_masked: torch.Tensor, class_token=None) -> torch.Tensor:
        b = s_masked.shape[0]
        h = torch.cat([self._class_slot(class_token, b, s_masked.device),
                       self.tok_emb(s_masked)], dim=1) + self.pos_emb
        return self._run(h)[:, 1:]


class HFPrior(_Transformer):
    """p(s_hf | s_lf, masked s_hf, class): LF tokens are a conditioning prefix."""

    def __init__(self, cfg: PriorConfig, seq_len: int, lf_len: int,
                 codes: Optional[torch.Tensor] = None, lf_codes: Optional[torch.Tensor] = None,
                 code_dim: int = 64, lf_code_dim: Optional[int] = None):
        super().__init__(cfg)
        self.seq_len, self.lf_len = seq_len, lf_len
        if codes is None:
            codes = torch.randn(cfg.K, code_dim)
        if lf_codes is None:
            lf_codes = torch.randn(cfg.K, lf_code_dim or code_dim)
        self.tok_emb = TokenEmbedding(codes, cfg.hidden)
        self.lf_emb = TokenEmbedding(lf_codes, cfg.hidden)
        self.pos_emb = nn.Parameter(torch.zeros(lf_len + seq_len + 1, cfg.hidden))
        self.seg_emb = nn.Embedding(2, cfg.hidden)
        segments = torch.cat([torch.zeros(lf_len), torch.ones(seq_len + 1)]).long()
        self.register_buffer("segments", segments)
        _init_weights(self)
        nn.init.normal_(self.pos_emb, std=0.02)

    def forward(self, s_masked: torch.Tensor, s_lf: torch.Tensor, class_token=None) -> torch.Tensor:
        b = s_masked.shape[0]
        h = torch.cat([self.lf_emb(s_lf),
                       self._class_slot(class_token, b, s_masked.device),
                       self.tok_emb(s_masked)], dim=1)
        h = h + self.pos_emb + self.seg_emb(self.segments)
        return self._run(h)[:, self.lf_len + 1:]


class Stage2Model(nn.Module):
    """LF prior plus (for band-split stage-1 models) the HF prior."""

    def __init__(self, cfg: PriorConfig, lf_len: int, hf_len: Optional[int] = None,
                 lf_codes: Optional[torch.Tensor] = None, hf_codes: Optional[torch.Tensor] = None,
                 code_dims: tuple = (64, 64)):
        super().__init__()
        self.cfg = cfg
        dl = code_dims[0] if lf_codes is None else lf_codes.shape[1]
        dh = code_dims[-1] if hf_codes is None else hf_codes.shape[1]
        self.lf = LFPrior(cfg, lf_len, lf_codes, code_dim=dl)
        self.hf = None
        self.code_dims = (dl,)
        if hf_len is not None:
            self.hf = HFPrior(cfg, hf_len, lf_len, hf_codes, lf_codes, code_dim=dh, lf_code_dim=dl)
            self.code_dims = (dl, dh)

    @classmethod
    def from_stage1(cls, cfg: PriorConfig, stage1: Stage1Model) -> "Stage2Model":
        if cfg.K != stage1.cfg.K:
            raise ValueError(f"prior K={cfg.K} does not match stage-1 K={stage1.cfg.K}")
        lens = [math.prod(br.latent_shape()[2:]) for br in stage1.branches()]
        codes = [br.codebook.codes.detach().float() for br in stage1.branches()]
        if len(lens) == 2:
            return cls(cfg, lens[0], lens[1], codes[0], codes[1])
        return cls(cfg, lens[0], None, codes[0])


def masked_nll(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over masked positions only."""
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask.to(nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1.0)


def gamma(r):
    return torch.cos(0.5 * math.pi * r)


def random_mask(batch: int, n_tok: int, generator: torch.Generator) -> torch.Tensor:
    """Boolean ``(batch, n_tok)`` masks with ceil(gamma(r) * n_tok) positions,
    r ~ U(0, 1) per row, at least one masked position."""
    r = torch.rand(batch, generator=generator)
    n_mask = torch.ceil(gamma(r) * n_tok).long().clamp(1, n_tok)
    ranks = torch.rand(batch, n_tok, generator=generator).argsort(dim=1).argsort(dim=1)
    return ranks < n_mask.unsqueeze(1)


def tokenize_dataset(ds: TimeSeriesDataset, stage1: Stage1Model, stochastic: bool = False,
                     generator: Optional[torch.Generator] = None) -> list:
    """Flattened token sequences per branch: ``[s_lf]`` or ``[s_lf, s_hf]``."""
    if ds.length != stage1.length:
        raise ValueError(f"dataset length {ds.length} != stage-1 length {stage1.length}")
    dtype = next(stage1.parameters()).dtype
    latents = stage1.latents(torch.tensor(ds.samples, dtype=dtype))
    return [stochastic_sample(z, br.codebook, stochastic, generator, batched=True)[1].flatten()
            for z, br in zip(latents, stage1.branches())]


def _generator(seed: int, *purpose: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, *purpose]).generate_state(1)[0]))
    return g


def stage2_loss(model: Stage2Model, tokens: list, labels: torch.Tensor,
                generator: torch.Generator):
    """Masked-token NLL for one batch; returns ``(total, lf, hf)``."""
    cfg = model.cfg
    b = labels.shape[0]
    drop = torch.rand(b, generator=generator) < cfg.p_uncond
    cls = torch.where(drop, torch.full_like(labels, cfg.null_class), labels)
    s_lf = tokens[0]
    m_lf = random_mask(b, s_lf.shape[1], generator)
    logits = model.lf(s_lf.masked_fill(m_lf, cfg.mask_id), cls)
    loss_lf = masked_nll(logits, s_lf, m_lf)
    loss_hf = loss_lf.new_zeros(())
    if model.hf is not None:
        s_hf = tokens[1]
        m_hf = random_mask(b, s_hf.shape[1], generator)
        logits = model.hf(s_hf.masked_fill(m_hf, cfg.mask_id), s_lf, cls)
        loss_hf = masked_nll(logits, s_hf, m_hf)
    return loss_lf + loss_hf, loss_lf, loss_hf


def train_stage2(ds: TimeSeriesDataset, stage1: Stage1Model, cfg: PriorConfig,
                 opt: OptimConfig = Stage2OptimConfig(), seed: int = 0,
                 stochastic: bool = True, model: Optional[Stage2Model] = None,
                 state: Optional[dict] = None, epochs: Optional[int] = None,
                 callback: Optional[Callable[[int, dict], None]] = None):
    """Masked-token training of the priors on frozen stage-1 tokens.

    Tokens are re-drawn every step with stochastic sampling from the cached
    encoder latents.  Returns ``(model, history, state)``.
    """
    if cfg.n_classes != ds.n_classes:
        raise ValueError(f"prior n_classes={cfg.n_classes} but dataset has {ds.n_classes}")
    stage1.eval()
    for p in stage1.parameters():
        p.requires_grad_(False)
    if model is None:
        torch.manual_seed(seed)
        model = Stage2Model.from_stage1(cfg, stage1)
    dtype = next(stage1.parameters()).dtype
    latents = stage1.latents(torch.tensor(ds.samples, dtype=dtype))
    branches = stage1.branches()
    labels_all = torch.tensor(ds.labels, dtype=torch.long)
    steps_per_epoch = math.ceil(len(ds) / opt.batch_size)
    optimizer, sched = make_optimizer(model.parameters(), opt, opt.max_epochs * steps_per_epoch)
    start = 0
    if state is not None:
        optimizer.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        start = state["epoch"]
    stop = opt.max_epochs if epochs is None else min(opt.max_epochs, start + epochs)
    history = []
    model.train()
    for epoch in range(start, stop):
        g = _generator(seed, 2, epoch)
        order = torch.as_tensor(epoch_order(len(ds), True, seed, epoch))
        sums = np.zeros(3)
        for step, lo in enumerate(range(0, len(ds), opt.batch_size)):
            idx = order[lo:lo + opt.batch_size]
            tokens = [stochastic_sample(z[idx], br.codebook, stochastic, g, batched=True)[1].flatten()
                      for z, br in zip(latents, branches)]
            total, l_lf, l_hf = stage2_loss(model, tokens, labels_all[idx], g)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite stage-2 loss at epoch {epoch}, step {step}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            sched.step()
            sums += np.array([float(torch.as_tensor(v).detach()) for v in (total, l_lf, l_hf)]) * len(idx)
        record = dict(zip(("total", "lf", "hf"), sums / len(ds)))
        history.append(record)
        if callback is not None:
            callback(epoch, record)
    model.eval()
    state = {"optimizer": optimizer.state_dict(), "scheduler": sched.state_dict(), "epoch": stop}
    return model, history, state
