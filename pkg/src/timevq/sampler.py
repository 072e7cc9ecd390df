"""Iterative masked decoding and time series synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import Stage1Model
from .prior import Stage2Model, _generator


@dataclass(frozen=True)
class GenerationRequest:
    n_samples: int
    class_index: Optional[int] = None
    guidance_scale: float = 1.0
    seed: int = 0
    T: int = 10
    temperature0: float = 1.0
    greedy: bool = False
    denormalize: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")


class CheckpointMismatch(ValueError):
    pass


def mask_schedule(t: int, T: int, n_tok: int) -> int:
    """Number of still-masked tokens after ``t`` of ``T`` decoding steps."""
    if not 0 <= t <= T:
        raise ValueError("t must lie in [0, T]")
    if t == T:
        return 0
    # the epsilon absorbs cos() rounding where n_tok*cos is an exact integer
    return min(n_tok, math.ceil(n_tok * math.cos(0.5 * math.pi * t / T) - 1e-9))


def guided_logits(logits_uncond: torch.Tensor, logits_cond: torch.Tensor, alpha: float) -> torch.Tensor:
    if logits_uncond.shape != logits_cond.shape:
        raise ValueError("logit shapes differ")
    if alpha == 1.0:
        return logits_cond
    if alpha == 0.0:
        return logits_uncond
    return logits_uncond + alpha * (logits_cond - logits_uncond)


def _gumbel(shape, generator):
    u = torch.rand(shape, generator=generator).clamp(1e-20, 1.0 - 1e-7)
    return -torch.log(-torch.log(u))


@torch.no_grad()
def decode_pass(model: Callable, n_tok: int, batch: int, mask_id: int,
                class_index: Optional[int] = None, null_class: int = 0,
                alpha: float = 1.0, T: int = 10, generator: Optional[torch.Generator] = None,
                temperature0: float = 1.0, greedy: bool = False,
                history: Optional[list] = None) -> torch.Tensor:
    """Decode a full token sequence from all-MASK in ``T`` steps.

    ``model(s, class_tokens)`` returns logits ``(batch, n_tok, K)``.  At step
    ``t`` a candidate token is drawn for every masked position; the
    ``mask_schedule(t) - mask_schedule(t+1)`` masked positions with the highest
    Gumbel-perturbed log-probability are committed and never revisited.
    ``history`` (if given) receives a copy of the sequence after every step.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    s = torch.full((batch, n_tok), mask_id, dtype=torch.long)
    null = torch.full((batch,), null_class, dtype=torch.long)
    for t in range(T):
        if class_index is None:
            logits = model(s, null)
        else:
            cond = torch.full((batch,), class_index, dtype=torch.long)
            if alpha == 1.0:
                logits = model(s, cond)
            else:
                logits = guided_logits(model(s, null), model(s, cond), alpha)
        logp = F.log_softmax(logits.float(), dim=-1)
        if greedy:
            cand = logp.argmax(-1)
        else:
            cand = torch.multinomial(logp.exp().reshape(-1, logp.shape[-1]), 1,
                                     generator=generator).reshape(batch, n_tok)
        cand_logp = logp.gather(-1, cand.unsqueeze(-1)).squeeze(-1)
        temp = temperature0 * (1.0 - (t + 1) / T)
        conf = cand_logp + temp * _gumbel(cand_logp.shape, generator)
        masked = s == mask_id
        conf = conf.masked_fill(~masked, -math.inf)
        k = mask_schedule(t, T, n_tok) - mask_schedule(t + 1, T, n_tok)
        if k > 0:
            idx = conf.topk(k, dim=1).indices
            s.scatter_(1, idx, cand.gather(1, idx))
        if history is not None:
            history.append(s.clone())
    return s


def check_compatible(stage1: Stage1Model, stage2: Stage2Model):
    branches = stage1.branches()
    priors = [p for p in (stage2.lf, stage2.hf) if p is not None]
    if len(branches) != len(priors):
        raise CheckpointMismatch(f"stage 1 has {len(branches)} bands, stage 2 has {len(priors)}")
    for br, pr in zip(branches, priors):
        n = math.prod(br.latent_shape()[2:])
        if n != pr.seq_len or br.codebook.K != stage2.cfg.K:
            raise CheckpointMismatch(
                f"band {br.band}: stage-1 grid {n} tokens / K={br.codebook.K}, "
                f"stage-2 expects {pr.seq_len} tokens / K={stage2.cfg.K}")


@torch.no_grad()
def sample_tokens(req: GenerationRequest, stage2: Stage2Model) -> list:
    """Double-pass decoding: LF from scratch, then HF given the decoded LF."""
    cfg = stage2.cfg
    if req.class_index is not None and not 0 <= req.class_index < cfg.n_classes:
        raise ValueError(f"class_index must lie in [0, {cfg.n_classes - 1}]")
    stage2.eval()
    common = dict(batch=req.n_samples, mask_id=cfg.mask_id, class_index=req.class_index,
                  null_class=cfg.null_class, alpha=req.guidance_scale, T=req.T,
                  temperature0=req.temperature0, greedy=req.greedy)
    s_lf = decode_pass(lambda s, c: stage2.lf(s, c), stage2.lf.seq_len,
                       generator=_generator(req.seed, 10), **common)
    if stage2.hf is None:
        return [s_lf]
    s_hf = decode_pass(lambda s, c: stage2.hf(s, s_lf, c), stage2.hf.seq_len,
                       generator=_generator(req.seed, 11), **common)
    return [s_lf, s_hf]


@torch.no_grad()
def generate(req: GenerationRequest, stage1: Stage1Model, stage2: Stage2Model,
             mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Synthesize ``(n_samples, L)`` series as the sum of the decoded bands."""
    check_compatible(stage1, stage2)
    tokens = sample_tokens(req, stage2)
    x = stage1.decode_tokens(tokens).double().numpy()
    if req.denormalize:
        x = x * std + mean
    return x


class VQGenerator:
    """Trained two-stage model exposed as a class-conditional sampler."""

    conditional = True

    def __init__(self, stage1: Stage1Model, stage2: Stage2Model, guidance_scale: float = 1.0,
                 T: int = 10, temperature0: float = 1.0, batch_size: int = 512):
        check_compatible(stage1, stage2)
        self.stage1, self.stage2 = stage1, stage2
        self.guidance_scale, self.T, self.temperature0 = guidance_scale, T, temperature0
        self.batch_size = batch_size

    @property
    def n_classes(self) -> int:
        return self.stage2.cfg.n_classes

    def sample(self, n: int, class_index: Optional[int] = None, seed: int = 0) -> np.ndarray:
        out = []
        for i, lo in enumerate(range(0, n, self.batch_size)):
            req = GenerationRequest(min(self.batch_size, n - lo), class_index, self.guidance_scale,
                                    seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                                    T=self.T, temperature0=self.temperature0)
            out.append(generate(req, self.stage1, self.stage2))
        return np.concatenate(out, axis=0)
