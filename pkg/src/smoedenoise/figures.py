"""Matplotlib rendering of report figures to files (Agg backend only).

The CLI's report paths can drop a PNG next to their CSV/JSON output:
the 1D demo's kernels/gates/regression panels, and side-by-side image
comparisons for simulate/denoise/evaluate runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .image import ImageBuffer  # noqa: E402


def render_demo_1d(x: np.ndarray, kernels: np.ndarray, gates: np.ndarray,
                   y: np.ndarray, path) -> None:
    """Three stacked panels: kernels, gates, and the regression curve."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    for i in range(kernels.shape[0]):
        axes[0].plot(x, kernels[i], label=f"k{i + 1}")
        axes[1].plot(x, gates[i], label=f"g{i + 1}")
    axes[0].set_ylabel("kernels")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[1].set_ylabel("gates")
    axes[2].plot(x, y, color="black")
    axes[2].set_ylabel("regression")
    axes[2].set_xlabel("x")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_comparison(panels: list[tuple[str, ImageBuffer]], path,
                      caption: str | None = None) -> None:
    """Grayscale panels side by side with a shared intensity range."""
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img.pixels, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(title, fontsize=10)
        ax.axis("off")
    if caption:
        fig.suptitle(caption, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
