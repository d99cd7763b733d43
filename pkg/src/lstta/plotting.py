"""Figure output for the report commands (file backend only)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "svg.hashsalt": "lstta",  # stable element ids in svg output
}


def _metadata(suffix: str, config: dict[str, Any] | None) -> dict[str, Any]:
    """Config echo in the file metadata; version stamps dropped so renders are reproducible."""
    text = json.dumps(config, sort_keys=True) if config is not None else None
    if suffix == ".png":
        return {"Software": None, **({"Description": text} if text else {})}
    if suffix == ".svg":
        return {"Date": None, **({"Description": text} if text else {})}
    if suffix == ".pdf":
        return {"CreationDate": None, **({"Subject": text} if text else {})}
    return {}


def _save(fig, path: str | Path, config: dict[str, Any] | None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_metadata(path.suffix.lower(), config))
    plt.close(fig)
    return path


def mask_heatmap(masks: np.ndarray, path: str | Path, needle_t: int | None = None,
                 title: str | None = None, config: dict[str, Any] | None = None) -> Path:
    """One row per block, one column per timestamp; optional marker at the needle."""
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    n_blocks, t = masks.shape
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.45 * t + 1.2), 0.45 * n_blocks + 1.0))
        im = ax.imshow(masks, aspect="auto", cmap="viridis", vmin=0.0, vmax=max(float(masks.max()), 1e-12))
        ax.set_xticks(range(t))
        ax.set_yticks(range(n_blocks), [f"block {j + 1}" for j in range(n_blocks)])
        ax.set_xlabel("timestamp")
        if needle_t is not None:
            ax.axvline(needle_t, color="w", lw=1.0, ls="--")
        fig.colorbar(im, ax=ax, label="importance")
        if title:
            ax.set_title(title)
        return _save(fig, path, config)


def ablation_bars(labels: Sequence[str], means: Sequence[float], sds: Sequence[float], path: str | Path,
                  chance: float | None = None, config: dict[str, Any] | None = None) -> Path:
    y = np.arange(len(labels))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.35 * len(labels) + 1.0))
        ax.barh(y, means, xerr=sds, color="C0", capsize=2)
        ax.set_yticks(y, labels)
        ax.invert_yaxis()
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("eval accuracy")
        if chance is not None:
            ax.axvline(chance, color="0.4", lw=0.8, ls=":")
        return _save(fig, path, config)


def sweep_plot(ks: Sequence[int], means: Sequence[float], sds: Sequence[float], path: str | Path,
               config: dict[str, Any] | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.errorbar(ks, means, yerr=sds, marker="o", color="C1", capsize=2)
        ax.set_xscale("log", base=2)
        ax.set_xticks(list(ks), [str(k) for k in ks])
        ax.set_xlabel("latent tokens K")
        ax.set_ylabel("eval accuracy")
        ax.set_ylim(0.0, 1.02)
        return _save(fig, path, config)
