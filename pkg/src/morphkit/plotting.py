"""Figures written next to the CLI's CSV/JSON outputs.

Everything renders through the Agg backend to PNG files.  Metadata is
stripped so two runs with the same inputs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 6.0
colors = ["#08589e", "#d95f0e", "#4eb3d3", "#7a0177", "#31a354"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "font.size": 8,
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "lines.linewidth": 1.2,
    "image.cmap": "gray",
}

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def _mid_slices(vol):
    """Central x, y and z slices of a ``(H, W, L)`` volume."""
    h, w, l = vol.shape
    return vol[h // 2], vol[:, w // 2], vol[:, :, l // 2]


def plot_loss_trace(losses, best, path) -> None:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.plot(np.arange(len(losses)), losses, label="loss", alpha=0.6)
        ax.plot(np.arange(len(best)), best, label="best so far")
        ax.set_xlabel("iteration")
        ax.set_ylabel("objective")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_registration(fixed, moving, warped, det, path) -> None:
    """Mid-plane slices of fixed, moving, warped and the Jacobian determinant."""
    rows = [("fixed", fixed), ("moving", moving), ("warped", warped), ("det J", det)]
    with plt.rc_context(params):
        fig, axes = plt.subplots(len(rows), 3, figsize=(fig_width, fig_width * 1.2))
        for r, (name, vol) in enumerate(rows):
            cmap = "coolwarm" if name == "det J" else "gray"
            for c, sl in enumerate(_mid_slices(np.asarray(vol))):
                ax = axes[r, c]
                im = ax.imshow(sl.T, origin="lower", cmap=cmap)
                ax.set_xticks([])
                ax.set_yticks([])
                if c == 0:
                    ax.set_ylabel(name)
                if r == 0:
                    ax.set_title("xyz"[c] + " mid-plane")
            fig.colorbar(im, ax=axes[r].tolist(), shrink=0.8)
        _save(fig, path)


def plot_calibration(tables: dict, path) -> None:
    """Mean error against mean uncertainty per bin, one series per estimator."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        top = 0.0
        for name, t in tables.items():
            keep = t.count > 0
            ax.plot(t.mean_uncertainty[keep], t.mean_error[keep], "o-", label=f"{name} (UCE {t.uce:.3g})")
            top = max(top, float(t.mean_uncertainty[keep].max()), float(t.mean_error[keep].max()))
        ax.plot([0, top], [0, top], "k--", lw=0.8, label="ideal")
        ax.set_xlabel("mean predicted uncertainty")
        ax.set_ylabel("mean squared error")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_erf(erf, path, tap=None) -> None:
    """Log-scaled mid-plane slices of an effective receptive field."""
    erf = np.asarray(erf, dtype=np.float64)
    peak = erf.max() if erf.max() > 0 else 1.0
    logged = np.log10(np.maximum(erf / peak, 1e-12))
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, 3, figsize=(fig_width, fig_width / 3 + 0.4))
        for c, sl in enumerate(_mid_slices(logged)):
            im = axes[c].imshow(sl.T, origin="lower", vmin=-12, vmax=0, cmap="viridis")
            axes[c].set_title("xyz"[c] + " mid-plane")
            axes[c].set_xticks([])
            axes[c].set_yticks([])
        fig.colorbar(im, ax=axes.tolist(), shrink=0.8, label="log10 relative influence")
        if tap is not None:
            fig.suptitle(f"tap {tuple(tap)}")
        _save(fig, path)
