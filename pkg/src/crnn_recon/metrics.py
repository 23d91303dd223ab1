"""Reconstruction quality metrics and feature-map similarity.

All quality metrics work on magnitude images. Both inputs are divided by the
peak magnitude of the reference, so PSNR uses a fixed peak of 1.
Sequences ``(T, H, W)`` are handled frame by frame where the metric is local
(SSIM, HFEN) and as a whole otherwise (MSE, PSNR).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HFEN_SIZE = 15
HFEN_SIGMA = 1.5


def _normalised_pair(recon, reference):
    a = np.abs(np.asarray(recon)).astype(np.float64)
    b = np.abs(np.asarray(reference)).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs reference {b.shape}")
    peak = b.max()
    if peak > 0:
        a, b = a / peak, b / peak
    return a, b


def mse(recon, reference) -> float:
    a, b = _normalised_pair(recon, reference)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float, peak: float = 1.0) -> float:
    if value == 0:
        return math.inf
    return float(10 * np.log10(peak ** 2 / value))


def psnr(recon, reference) -> float:
    """PSNR in dB with peak 1 after reference normalisation; ``inf`` if identical."""
    return psnr_from_mse(mse(recon, reference))


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, g1d: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered positions."""
    out = ndimage.correlate1d(img, g1d, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g1d, axis=1, mode="constant")
    h = len(g1d) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM of two 2D images (dynamic range 1) on the valid region."""
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"frame {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a ** 2
    var_b = _valid_filter(b * b, g) - mu_b ** 2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def _frames(a):
    return a.reshape((-1,) + a.shape[-2:])


def ssim(recon, reference) -> float:
    a, b = _normalised_pair(recon, reference)
    return float(np.mean([ssim_map(fa, fb).mean() for fa, fb in zip(_frames(a), _frames(b))]))


def log_kernel(size: int = HFEN_SIZE, sigma: float = HFEN_SIGMA) -> np.ndarray:
    """Zero-sum Laplacian-of-Gaussian kernel (same construction as MATLAB's ``fspecial('log')``)."""
    r = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    rr = xx ** 2 + yy ** 2
    g = np.exp(-rr / (2 * sigma ** 2))
    g /= g.sum()
    h = g * (rr - 2 * sigma ** 2) / sigma ** 4
    return h - h.sum() / h.size


def hfen(recon, reference) -> float:
    """Relative l2 error of LoG-filtered magnitudes, averaged over frames.

    Borders are padded symmetrically so constant offsets are removed exactly.
    """
    a, b = _normalised_pair(recon, reference)
    kernel = log_kernel()
    values = []
    for fa, fb in zip(_frames(a), _frames(b)):
        la = ndimage.correlate(fa, kernel, mode="reflect")
        lb = ndimage.correlate(fb, kernel, mode="reflect")
        denom = np.linalg.norm(lb)
        # a flat frame leaves only round-off after the zero-sum kernel
        if denom <= 1e-10 * np.sqrt(fb.size):
            raise ValueError("HFEN reference frame has zero LoG energy")
        values.append(np.linalg.norm(la - lb) / denom)
    return float(np.mean(values))


# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    per_sequence: list[dict[str, float]]
    metadata: dict = field(default_factory=dict)

    METRICS = ("mse", "psnr", "ssim", "hfen")

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in self.METRICS:
            vals = np.array([s[m] for s in self.per_sequence], dtype=np.float64)
            if not len(vals):
                out[m] = {}
                continue
            with np.errstate(invalid="ignore"):
                out[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
            return v

        return json.dumps(
            {
                "metadata": self.metadata,
                "per_sequence": [{k: clean(v) for k, v in s.items()} for s in self.per_sequence],
                "aggregate": {m: {k: clean(v) for k, v in d.items()} for m, d in self.aggregate().items()},
            },
            indent=2,
        )


def evaluate(recon, reference) -> dict[str, float]:
    return {
        "mse": mse(recon, reference),
        "psnr": psnr(recon, reference),
        "ssim": ssim(recon, reference),
        "hfen": hfen(recon, reference),
    }


def evaluate_many(recons, references, metadata: dict | None = None, workers: int = 1) -> MetricReport:
    pairs = list(zip(recons, references))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda p: evaluate(*p), pairs))
    else:
        rows = [evaluate(r, ref) for r, ref in pairs]
    return MetricReport(rows, metadata or {})


# --------------------------------------------------------------------------


@dataclass
class SimilarityResult:
    matrix: np.ndarray
    kept: np.ndarray
    excluded: np.ndarray

    def off_diagonal(self) -> np.ndarray:
        n = self.matrix.shape[0]
        return self.matrix[~np.eye(n, dtype=bool)]


def cosine_similarity_matrix(feature_maps) -> SimilarityResult:
    """Pairwise ``cos(theta)`` between flattened maps; zero-norm maps are excluded."""
    maps = [np.asarray(m, dtype=np.float64) for m in feature_maps]
    if len({m.shape for m in maps}) > 1:
        raise ValueError(f"feature maps differ in shape: {sorted({m.shape for m in maps})}")
    flat = np.stack([m.ravel() for m in maps]) if maps else np.zeros((0, 0))
    norms = np.linalg.norm(flat, axis=1)
    kept = np.flatnonzero(norms > 0)
    excluded = np.flatnonzero(norms == 0)
    if len(kept) < 2:
        raise ValueError(f"need at least 2 nonzero feature maps, got {len(kept)} of {len(maps)}")
    unit = flat[kept] / norms[kept, None]
    mat = np.clip(unit @ unit.T, -1.0, 1.0)
    mat = (mat + mat.T) / 2
    np.fill_diagonal(mat, 1.0)
    return SimilarityResult(mat, kept, excluded)
