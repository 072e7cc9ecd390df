"""Static PCA / t-SNE comparisons of real and generated samples."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE


def embed_2d(x: np.ndarray, method: str, seed: int = 0) -> np.ndarray:
    if method == "pca":
        return PCA(n_components=2, random_state=seed).fit_transform(x)
    perplexity = min(30.0, max(2.0, (len(x) - 1) / 3))
    return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(x)


def pca_explained(x: np.ndarray) -> np.ndarray:
    return PCA(n_components=min(2, *x.shape)).fit(x).explained_variance_ratio_


def _write_coords(path: Path, coords: np.ndarray, source: list, labels: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "label", "x", "y"])
        for s, lab, (a, b) in zip(source, labels, coords):
            w.writerow([s, int(lab), f"{a:.8g}", f"{b:.8g}"])


def _scatter(path: Path, coords, source, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    source = np.asarray(source)
    for name, color in (("real", "tab:blue"), ("gen", "tab:orange")):
        m = source == name
        ax.scatter(coords[m, 0], coords[m, 1], s=8, alpha=0.6, c=color, label=name)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_embeddings(real: np.ndarray, gen: np.ndarray, out_dir, feat_real=None, feat_gen=None,
                    labels_real=None, labels_gen=None, seed: int = 0) -> dict:
    """PCA and t-SNE of raw series (and FCN features when given).

    Writes ``<space>_<method>.png`` and ``<space>_<method>.csv`` per
    combination; returns the mapping from name to coordinates.
    """
    real, gen = np.asarray(real), np.asarray(gen)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValueError(f"real {real.shape} and generated {gen.shape} sample shapes differ")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = ["real"] * len(real) + ["gen"] * len(gen)
    lab_r = np.full(len(real), -1) if labels_real is None else np.asarray(labels_real)
    lab_g = np.full(len(gen), -1) if labels_gen is None else np.asarray(labels_gen)
    labels = np.concatenate([lab_r, lab_g])
    spaces = {"raw": np.vstack([real, gen])}
    if feat_real is not None:
        spaces["features"] = np.vstack([feat_real, feat_gen])
    out = {}
    for space, data in spaces.items():
        for method in ("pca", "tsne"):
            coords = embed_2d(data, method, seed)
            name = f"{space}_{method}"
            _write_coords(out_dir / f"{name}.csv", coords, source, labels)
            _scatter(out_dir / f"{name}.png", coords, source, f"{method.upper()} of {space}")
            out[name] = coords
    return out
