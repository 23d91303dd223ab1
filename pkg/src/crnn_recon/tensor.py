"""Differentiable numerical primitives with explicit forward/backward passes.

Tensors are plain numpy arrays. Convolutions use the cross-correlation
convention (no kernel flip), stride 1 and zero padding of ``k // 2`` so the
spatial size is preserved. Training runs in float32; gradient verification
runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


def _check_conv_shapes(x: np.ndarray, weight: np.ndarray) -> int:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d expects input [B,C,H,W] and weight [O,C,k,k], got input "
            f"{x.shape} and weight {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has C_in={x.shape[1]} but "
            f"weight {weight.shape} expects C_in={weight.shape[1]}"
        )
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got weight {weight.shape}")
    return k


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold ``x`` [B,C,H,W] into columns of shape [C*k*k, B*H*W]."""
    B, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((C, k, k, B, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + H, j:j + W].transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * H * W)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-size 2D cross-correlation.

    ``out[b, o, h, w] = bias[o] + sum_{c,i,j} weight[o, c, i, j] * xpad[b, c, h + i, w + j]``
    """
    k = _check_conv_shapes(x, weight)
    B, _, H, W = x.shape
    out = weight.reshape(weight.shape[0], -1) @ im2col(x, k)
    out = out.reshape(weight.shape[0], B, H, W).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_input_grad(grad_out: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # adjoint of a same-padded correlation is a correlation with the flipped,
    # channel-transposed kernel
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(grad_out, flipped)


def conv2d_weight_grad(grad_out: np.ndarray, saved_input: np.ndarray, k: int) -> np.ndarray:
    O = grad_out.shape[1]
    C = saved_input.shape[1]
    g = grad_out.transpose(1, 0, 2, 3).reshape(O, -1)
    return (g @ im2col(saved_input, k).T).reshape(O, C, k, k)


def conv2d_backward(
    grad_out: np.ndarray, saved_input: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    k = _check_conv_shapes(saved_input, weight)
    expected = (saved_input.shape[0], weight.shape[0]) + saved_input.shape[2:]
    if grad_out.shape != expected:
        raise ValueError(
            f"conv2d_backward: grad_out shape {grad_out.shape} does not match "
            f"forward output shape {expected}"
        )
    grad_input = conv2d_input_grad(grad_out, weight)
    grad_weight = conv2d_weight_grad(grad_out, saved_input, k)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, grad_weight, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, saved: np.ndarray) -> np.ndarray:
    """Gradient of ReLU; ``saved`` may be the input or the output.

    The subgradient at exactly zero is taken as 0.
    """
    return grad_out * (saved > 0)


def he_init(shape: tuple[int, ...], fan_in: int, seed, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal samples with std ``sqrt(2 / fan_in)``."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class ParameterStore:
    """Named learnable tensors together with their accumulated gradients."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: tuple(v.shape) for n, v in self.values.items()}

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def zero_grad(self) -> None:
        for n, v in self.values.items():
            self.grads[n] = np.zeros_like(v)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.values[name].shape:
            raise ValueError(
                f"gradient for {name!r} has shape {grad.shape}, "
                f"expected {self.values[name].shape}"
            )
        self.grads[name] += grad

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {n: v.copy() for n, v in self.values.items()},
            {n: g.copy() for n, g in self.grads.items()},
        )

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(
            {n: v.astype(dtype) for n, v in self.values.items()},
            {n: g.astype(dtype) for n, g in self.grads.items()},
        )

    def num_elements(self) -> int:
        return int(sum(v.size for v in self.values.values()))


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    epsilon: float
    tolerance: float
    # directions skipped because every step size crossed a ReLU kink
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def __str__(self) -> str:
        lines = [f"grad check (eps={self.epsilon:g}, tol={self.tolerance:g})"]
        for name, err in self.max_rel_error.items():
            extra = f"  ({self.skipped[name]} skipped)" if self.skipped.get(name) else ""
            lines.append(f"  {name:<28s} {err:.3e}{extra}")
        lines.append(f"  worst {self.worst:.3e} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _rel_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(fn):
    out = fn()
    if isinstance(out, tuple):
        return float(out[0]), out[1]
    return float(out), None


def _central_difference(fn, p, v, epsilon, base_pattern, retries):
    """Directional central difference; shrinks the step while a kink is crossed."""
    eps = epsilon
    for _ in range(retries + 1):
        p += eps * v
        fp, pat_p = _evaluate(fn)
        p -= 2 * eps * v
        fm, pat_m = _evaluate(fn)
        p += eps * v
        if base_pattern is None or (np.array_equal(pat_p, base_pattern) and np.array_equal(pat_m, base_pattern)):
            return (fp - fm) / (2 * eps), eps
        eps /= 10
    return None, eps


def grad_check(
    fn: Callable,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = 24,
    num_probes: int = 3,
    floor: float | None = None,
    kink_retries: int = 3,
    seed=0,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``fn`` evaluates the scalar objective using the arrays in ``params`` (which
    are perturbed in place and restored). It may also return
    ``(value, pattern)`` where ``pattern`` is the boolean ReLU activation
    pattern; a difference is then only accepted when both perturbed points
    keep the base pattern, and the step is divided by 10 (up to
    ``kink_retries`` times) otherwise.

    Small tensors are checked on every coordinate; larger ones on
    ``max_coords`` random coordinates plus ``num_probes`` random directions.
    The relative error is ``|a - n| / max(|a|, |n|, floor)``. The default
    ``floor`` is the central-difference round-off level divided by the
    tolerance, so gradients too small for finite differences to resolve (for
    example a bias whose effect data consistency removes exactly) do not turn
    round-off into a relative error of 1.
    """
    rng = np.random.default_rng(seed)
    f0, base_pattern = _evaluate(fn)
    report: dict[str, float] = {}
    skipped: dict[str, int] = {}
    for name in names if names is not None else params:
        p = params[name]
        g = grads[name]
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {name!r} is {p.dtype}")
        if max_coords is None or p.size <= max_coords:
            coords = np.arange(p.size)
            probes = 0
        else:
            coords = rng.choice(p.size, size=max_coords, replace=False)
            probes = num_probes
        directions = []
        for c in coords:
            v = np.zeros(p.size)
            v[c] = 1.0
            directions.append(v.reshape(p.shape))
        for _ in range(probes):
            v = rng.standard_normal(p.shape)
            directions.append(v / np.linalg.norm(v))
        worst = 0.0
        n_skip = 0
        for v in directions:
            numeric, eps = _central_difference(fn, p, v, epsilon, base_pattern, kink_retries)
            if numeric is None:
                n_skip += 1
                continue
            fl = floor
            if fl is None:
                fl = 10 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / eps / tolerance
            worst = max(worst, _rel_error(float(np.sum(g * v)), numeric, fl))
        report[name] = worst
        skipped[name] = n_skip
    return GradCheckReport(report, epsilon, tolerance, skipped)
