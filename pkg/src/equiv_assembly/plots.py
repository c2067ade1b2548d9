"""Report figures, rendered headless to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_TERMS = ("rot", "trans", "point", "recon", "embed", "adv", "disc", "total")


def plot_losses(history: list[dict], path) -> Path:
    """Per-epoch loss curves, log scale."""
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for term in LOSS_TERMS:
        values = [r.get(term) for r in history]
        if any(v is None for v in values) or not any(values):
            continue
        ax.plot(epochs, values, label=term, lw=2 if term == "total" else 1)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_geodesic_histogram(errors, path, chance: float | None = None) -> Path:
    """Histogram of per-part rotation errors in radians."""
    errors = np.asarray(errors, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(errors, bins=36, range=(0.0, np.pi), color="tab:blue", alpha=0.8)
    ax.axvline(errors.mean(), color="k", ls="--", label=f"mean {errors.mean():.3f}")
    if chance is not None:
        ax.axvline(chance, color="tab:red", ls=":", label=f"chance {chance:.3f}")
    ax.set_xlabel("geodesic error (rad)")
    ax.set_ylabel("parts")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
