import matplotlib as mpl
mpl.use('Agg')
import matplotlib.pyplot as plt

from typing import Optional, Sequence
import numpy as np
import pandas as pd

from constants import LOSS_SMOOTHING_WINDOW

_RC = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "savefig.dpi": 150,
}


def plot_grid(images: Sequence[Sequence[np.ndarray]], path: str, row_labels: Optional[Sequence[str]] = None,
              col_labels: Optional[Sequence[str]] = None, tile_inches: float = 1.2) -> str:
    """Rows of HxWx3 images in [0, 1]; one row per identity, one column per sweep value."""
    n_rows = len(images)
    n_cols = max(len(row) for row in images)
    with mpl.rc_context(_RC):
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(tile_inches * n_cols, tile_inches * n_rows),
                                 squeeze=False)
        for r in range(n_rows):
            for c in range(n_cols):
                ax = axes[r][c]
                ax.set_xticks([])
                ax.set_yticks([])
                if c < len(images[r]):
                    ax.imshow(np.clip(images[r][c], 0., 1.), interpolation='nearest')
                else:
                    ax.axis('off')
                if r == 0 and col_labels is not None and c < len(col_labels):
                    ax.set_title(col_labels[c])
                if c == 0 and row_labels is not None and r < len(row_labels):
                    ax.set_ylabel(row_labels[r])
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def smoothed(values: pd.Series, window: int = LOSS_SMOOTHING_WINDOW) -> pd.Series:
    return values.rolling(window, min_periods=1).mean()


def plot_loss_curve(report: pd.DataFrame, path: str, window: int = LOSS_SMOOTHING_WINDOW) -> str:
    columns = [c for c in ("L_rec", "L_disen", "L_reg", "total") if c in report and report[c].notna().any()]
    with mpl.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5., 3.))
        for column in columns:
            ax.plot(report["step"], smoothed(report[column], window), label=column, linewidth=1.)
        ax.set_xlabel("step")
        ax.set_ylabel("loss (rolling mean, {} steps)".format(window))
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_attention_map(image: np.ndarray, scores: np.ndarray, path: str, title: str = "") -> str:
    """Heat map of per-pixel attention mass over a generated image.

    `scores` is (h*w, K) softmax rows of one layer; one panel per identity token.
    """
    size = image.shape[0]
    n = int(round(np.sqrt(scores.shape[0])))
    per_token = scores.reshape(n, n, -1)
    with mpl.rc_context(_RC):
        fig, axes = plt.subplots(1, per_token.shape[-1] + 1, figsize=(1.6 * (per_token.shape[-1] + 1), 1.8))
        axes[0].imshow(np.clip(image, 0., 1.), interpolation='nearest')
        axes[0].set_title(title or "sample")
        for k in range(per_token.shape[-1]):
            axes[k + 1].imshow(np.clip(image, 0., 1.), interpolation='nearest')
            axes[k + 1].imshow(per_token[..., k], cmap='inferno', alpha=0.6, interpolation='bilinear',
                               extent=(-0.5, size - 0.5, size - 0.5, -0.5), vmin=0., vmax=1.)
            axes[k + 1].set_title("token {}".format(k))
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
