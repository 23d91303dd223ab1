"""Figure export. Everything renders off-screen straight to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# error maps are shown on a fixed |error| window so runs stay comparable
ERROR_WINDOW = 0.1

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def to_uint8(img: np.ndarray, vmin: float = 0.0, vmax: float = 1.0) -> np.ndarray:
    scaled = (np.asarray(img, dtype=np.float64) - vmin) / (vmax - vmin)
    return np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)


def save_magnitude(path, frame: np.ndarray) -> None:
    """8-bit grayscale PNG of ``|frame|`` on the fixed window [0, 1]."""
    plt.imsave(path, to_uint8(np.abs(frame)), cmap="gray", vmin=0, vmax=255)


def save_error(path, frame: np.ndarray, reference: np.ndarray, window: float = ERROR_WINDOW) -> None:
    err = np.abs(np.abs(frame) - np.abs(reference))
    plt.imsave(path, to_uint8(err, 0, window), cmap="inferno", vmin=0, vmax=255)


def iteration_strip(path, zero_filled, iterations, reference=None, frame: int = 0) -> None:
    """One frame across iterations: zero-filled, x_rec^(1..N) and the reference."""
    panels = [("zero-filled", zero_filled)] + [(f"iter {i + 1}", x) for i, x in enumerate(iterations)]
    if reference is not None:
        panels.append(("reference", reference))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(panels), figsize=(1.4 * len(panels), 1.8))
        for ax, (title, x) in zip(np.atleast_1d(axes), panels):
            ax.imshow(np.abs(x[frame]), cmap="gray", vmin=0, vmax=1)
            ax.set_title(title)
            ax.axis("off")
        fig.savefig(path)
        plt.close(fig)


def sweep_plot(path, n_iters, psnrs, n_train: int | None = None, label: str | None = None) -> None:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 2.4))
        ax.plot(n_iters, psnrs, "o-", label=label)
        if n_train is not None:
            ax.axvline(n_train, color="0.6", ls="--", lw=0.8)
        ax.set_xlabel("iterations at test time")
        ax.set_ylabel("PSNR (dB)")
        if label:
            ax.legend()
        fig.savefig(path)
        plt.close(fig)


def similarity_figure(path, matrix: np.ndarray, title: str = "") -> None:
    """Heatmap of pairwise cosine similarity next to the off-diagonal histogram."""
    n = matrix.shape[0]
    off = matrix[~np.eye(n, dtype=bool)]
    with plt.rc_context(RC):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(6.4, 2.8), gridspec_kw={"width_ratios": [1, 1.2]})
        im = a0.imshow(matrix, cmap="viridis", vmin=min(0.0, float(matrix.min())), vmax=1)
        fig.colorbar(im, ax=a0, fraction=0.046)
        a0.set_title(title or "cosine similarity")
        a1.hist(off, bins=50, range=(-1, 1) if off.min() < 0 else (0, 1), color="C0")
        a1.set_xlabel(r"$\cos\theta$")
        a1.set_ylabel("pairs")
        fig.savefig(path)
        plt.close(fig)


def training_curve(path, steps, losses, val_steps=(), val_psnr=()) -> None:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.4))
        ax.semilogy(steps, losses, lw=0.6, color="C0")
        ax.set_xlabel("step")
        ax.set_ylabel("train loss", color="C0")
        if len(val_steps):
            ax2 = ax.twinx()
            ax2.plot(val_steps, val_psnr, "o-", color="C1", ms=3)
            ax2.set_ylabel("val PSNR (dB)", color="C1")
        fig.savefig(path)
        plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
