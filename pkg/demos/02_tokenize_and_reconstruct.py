"""
Stage 1: turning series into tokens
===================================

Two small convolutional autoencoders, one per band, each with its own
codebook.  After training, every series becomes two short grids of integer
token ids and can be rebuilt from those ids alone.

Epoch counts are kept small so this runs in about a minute on a laptop CPU;
set ``EPOCHS`` higher for nicer reconstructions.
"""

import os
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from timevq import OptimConfig, Stage1Config, load_ucr_dataset, train_stage1

EPOCHS = int(os.environ.get("EPOCHS", 150))
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

train, test = load_ucr_dataset("ItalyPowerDemand")
print(f"{train.name}: {len(train)} train / {len(test)} test series of length {train.length}")

# %%
# Small preset: 32 channels, 2 residual blocks, 32 codes per band.
cfg = Stage1Config.small()
model, history, _ = train_stage1(train, cfg, OptimConfig(batch_size=32, max_epochs=EPOCHS), seed=0)
print("total loss, first vs last epoch: %.3f -> %.3f" % (history[0].total, history[-1].total))

# %%
# Token grids keep all 5 frequency rows.  The time axis is halved toward 8
# steps (LF) and 32 steps (HF); this series only has 13 STFT frames, so LF
# ends at 6 and HF stays at 13.  Rows outside a band were zero-padded, which
# shows up as one repeated token id along those rows.
x = torch.tensor(test.samples[:8], dtype=torch.float32)
lf_tok, hf_tok = model.tokenize(x)
print("LF token grid:", tuple(lf_tok.indices.shape), " HF token grid:", tuple(hf_tok.indices.shape))
print("first LF sequence:", lf_tok.flatten()[0].tolist())

# codebook usage says how much of the vocabulary training actually found useful
for name, tok, br in zip(("LF", "HF"), (lf_tok, hf_tok), model.branches()):
    used = len(torch.unique(tok.indices))
    print(f"{name}: {used}/{br.codebook.K} codes used on 8 test series")

# %%
# Rebuild from tokens only and compare to the input.
x_rec = model.decode_tokens([lf_tok.flatten(), hf_tok.flatten()]).numpy()
mse = float(np.mean((x_rec - x.numpy()) ** 2))
print(f"test reconstruction MSE from tokens: {mse:.4f} (data variance is about 1)")

fig, axes = plt.subplots(2, 4, figsize=(10, 4), sharey=True)
for ax, a, b in zip(axes.flat, x.numpy(), x_rec):
    ax.plot(a, label="input")
    ax.plot(b, "--", label="from tokens")
axes.flat[0].legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "reconstructions.png", dpi=110)
plt.close(fig)

torch.save(model.state_dict(), out / "stage1_state.pt")
