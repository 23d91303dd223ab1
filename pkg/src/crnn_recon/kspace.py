"""Cartesian MR forward model: centered unitary FFTs, masks, undersampling and
the closed-form data-consistency step.

Arrays are complex with the two trailing axes ``(phase_encode, frequency_encode)``.
A sampling mask selects whole phase-encode lines, so it is constant along the
last axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.fft

CENTER_LINES = 8

Lambda0 = Union[float, str]


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D FFT over the last two axes (DC at index n // 2)."""
    x = scipy.fft.ifftshift(x, axes=(-2, -1))
    x = scipy.fft.fft2(x, axes=(-2, -1), norm="ortho")
    return scipy.fft.fftshift(x, axes=(-2, -1))


def ifft2c(k: np.ndarray) -> np.ndarray:
    k = scipy.fft.ifftshift(k, axes=(-2, -1))
    k = scipy.fft.ifft2(k, axes=(-2, -1), norm="ortho")
    return scipy.fft.fftshift(k, axes=(-2, -1))


def to_channels(x: np.ndarray) -> np.ndarray:
    """Complex ``[..., T, H, W]`` to real ``[..., T, 2, H, W]``."""
    return np.stack([x.real, x.imag], axis=-3)


def from_channels(x: np.ndarray) -> np.ndarray:
    if x.shape[-3] != 2:
        raise ValueError(f"expected 2 channels at axis -3, got shape {x.shape}")
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def center_lines(num_pe_lines: int) -> np.ndarray:
    """Indices of the 8 phase-encode lines closest to DC."""
    c = num_pe_lines // 2
    return np.arange(c - CENTER_LINES // 2, c + CENTER_LINES // 2)


def lines_for_acceleration(num_pe_lines: int, acceleration: float) -> int:
    return int(np.floor(num_pe_lines / acceleration + 0.5))


def generate_mask(
    num_pe_lines: int,
    num_fe_points: int,
    T: int,
    acceleration: float,
    sigma_fraction: float = 1 / 6,
    seed=None,
) -> np.ndarray:
    """Variable-density Cartesian mask of shape ``(T, num_pe_lines, num_fe_points)``.

    Each frame keeps the 8 central lines and draws the rest without
    replacement with probability proportional to a zero-mean Gaussian in the
    signed offset from DC (std ``sigma_fraction * num_pe_lines``).
    """
    if acceleration <= 1:
        raise ValueError(f"acceleration must be > 1, got {acceleration}")
    if num_pe_lines < 2 * CENTER_LINES:
        raise ValueError(f"need at least {2 * CENTER_LINES} phase-encode lines, got {num_pe_lines}")
    if T < 1 or num_fe_points < 1:
        raise ValueError(f"degenerate mask size T={T}, num_fe_points={num_fe_points}")
    n_lines = lines_for_acceleration(num_pe_lines, acceleration)
    if n_lines < CENTER_LINES:
        raise ValueError(
            f"acceleration too high for the 8-line center block: "
            f"{num_pe_lines}/{acceleration} gives {n_lines} lines"
        )
    rng = np.random.default_rng(seed)
    center = center_lines(num_pe_lines)
    others = np.setdiff1d(np.arange(num_pe_lines), center)
    offsets = others - num_pe_lines // 2
    sigma = sigma_fraction * num_pe_lines
    density = np.exp(-0.5 * (offsets / sigma) ** 2)
    density /= density.sum()

    mask = np.zeros((T, num_pe_lines, num_fe_points), dtype=np.float32)
    for t in range(T):
        picked = rng.choice(others, size=n_lines - CENTER_LINES, replace=False, p=density)
        mask[t, center] = 1
        mask[t, picked] = 1
    return mask


@dataclass
class KSpaceData:
    """Acquired samples ``y`` (zero outside the mask), the mask and the DC weight.

    ``lambda0`` is a nonnegative float or ``"exact"`` for the noiseless limit in
    which sampled k-space entries are replaced outright.
    """

    samples: np.ndarray
    mask: np.ndarray
    lambda0: Lambda0 = "exact"

    def __post_init__(self):
        check_lambda0(self.lambda0)

    @property
    def exact(self) -> bool:
        return self.lambda0 == "exact"


def check_lambda0(lambda0: Lambda0) -> None:
    if isinstance(lambda0, str):
        if lambda0 != "exact":
            raise ValueError(f"lambda0 must be a nonnegative number or 'exact', got {lambda0!r}")
    elif not lambda0 >= 0:
        raise ValueError(f"lambda0 must be nonnegative, got {lambda0}")


def undersample(x: np.ndarray, mask: np.ndarray, lambda0: Lambda0 = "exact"):
    """Retrospectively undersample ``x``; returns ``(x_u, KSpaceData)``."""
    check_broadcast(x.shape, mask.shape, "undersample: image", "mask")
    y = fft2c(x) * mask
    return ifft2c(y), KSpaceData(y, mask, lambda0)


def check_broadcast(shape, other, what, other_what) -> None:
    try:
        ok = np.broadcast_shapes(shape, other) == tuple(shape)
    except ValueError:
        ok = False
    if not ok:
        raise ValueError(f"{what} shape {tuple(shape)} does not agree with {other_what} shape {tuple(other)}")


def _dc_weights(mask: np.ndarray, lambda0: Lambda0):
    """Diagonal of Lambda and the weight applied to ``y`` on sampled entries."""
    if lambda0 == "exact":
        return 1 - mask, mask
    lam = float(lambda0)
    return 1 - mask * (lam / (1 + lam)), mask * (lam / (1 + lam))


def data_consistency(z: np.ndarray, kspace: KSpaceData) -> np.ndarray:
    """Blend the k-space of ``z`` with the acquired samples on the mask."""
    check_broadcast(z.shape, kspace.samples.shape, "data_consistency: image", "k-space")
    keep, take = _dc_weights(kspace.mask, kspace.lambda0)
    k = fft2c(z)
    return ifft2c(keep * k + take * kspace.samples)


def data_consistency_backward(grad_out: np.ndarray, kspace: KSpaceData) -> np.ndarray:
    """Gradient w.r.t. ``z``; the map is affine with a self-adjoint linear part."""
    keep, _ = _dc_weights(kspace.mask, kspace.lambda0)
    return ifft2c(keep * fft2c(grad_out))
