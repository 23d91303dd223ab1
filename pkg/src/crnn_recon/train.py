"""Supervised training: MSE objective, hard gradient clipping, Adam.

Every step draws a sequence, augments it, cuts a patch along the
frequency-encoding axis, draws a fresh mask and undersamples, so the network
never sees the same (target, mask) pair twice. Runs are deterministic for a
fixed seed.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kspace as ks
from . import metrics
from .data import AugmentConfig, augment, extract_patch
from .model import (
    NetworkConfig,
    backward,
    checkpoint_read,
    checkpoint_save,
    forward,
    init_params,
)
from .tensor import ParameterStore

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    batch_size: int = 1
    max_steps: int = 1000
    val_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0
    acceleration: float = 4.0
    sigma_fraction: float = 1 / 6
    patch_width: int | None = 32
    augment: bool = True
    # "constant", or "cosine": decay to zero over max_steps
    lr_schedule: str = "constant"
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment_config, dict):
            cfg = dict(self.augment_config)
            if "scale_range" in cfg:
                cfg["scale_range"] = tuple(cfg["scale_range"])
            self.augment_config = AugmentConfig(**cfg)
        if not self.clip > 0:
            raise ValueError(f"clip bound must be positive, got {self.clip}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in names})


def mse_loss(x_rec: np.ndarray, x_t: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all real and imaginary entries, and its gradient.

    For complex inputs the gradient is returned as ``dL/dRe + 1j * dL/dIm``.
    """
    if x_rec.shape != x_t.shape:
        raise ValueError(f"mse_loss shape mismatch: {x_rec.shape} vs {x_t.shape}")
    d = x_rec - x_t
    count = d.size * (2 if np.iscomplexobj(d) else 1)
    loss = float(np.sum(d.real ** 2 + (d.imag ** 2 if np.iscomplexobj(d) else 0)) / count)
    return loss, (2.0 / count) * d


def learning_rate_at(config: TrainConfig, step: int) -> float:
    """Learning rate for the 0-based ``step``."""
    if config.lr_schedule == "cosine" and config.max_steps > 0:
        return config.learning_rate * 0.5 * (1 + math.cos(math.pi * step / config.max_steps))
    return config.learning_rate


def clip_gradients(grads: dict[str, np.ndarray], c: float) -> dict[str, np.ndarray]:
    """Elementwise value clipping to ``[-c, c]``."""
    if not c > 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    return {n: np.clip(g, -c, c) for n, g in grads.items()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.values.items()},
                   {n: np.zeros_like(p) for n, p in params.values.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig, lr: float | None = None) -> None:
    """In-place Adam update with bias correction.

    ``theta -= lr * m_hat / (sqrt(v_hat) + eps)``; eps is added after the square root.
    """
    lr = config.learning_rate if lr is None else lr
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for n, p in params.items():
        g = grads[n]
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)


def loss_and_grad(params: ParameterStore, config: NetworkConfig, x_u, kspace, x_t) -> float:
    """Forward, MSE loss and backward; gradients land in ``params.grads``."""
    result = forward(x_u, kspace, config, params, keep_cache=True)
    loss, g = mse_loss(result.x_rec, x_t.astype(result.x_rec.dtype))
    params.zero_grad()
    backward(result, g, config, params)
    return loss


def activation_pattern(x_u, kspace, config: NetworkConfig, params: ParameterStore) -> np.ndarray:
    """Boolean ReLU pattern of a forward pass (kink detection for finite differences)."""
    result = forward(x_u, kspace, config, params, record=True)
    return np.concatenate([(a > 0).ravel() for acts in result.activations for a in acts[:-1]])


# --------------------------------------------------------------------------


@dataclass
class TrainState:
    params: ParameterStore
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    log: list[dict] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    pass


def new_state(net_config: NetworkConfig, train_config: TrainConfig) -> TrainState:
    params = init_params(net_config, seed=train_config.seed)
    return TrainState(params, AdamState.zeros_like(params),
                      np.random.default_rng([train_config.seed, 1]))


def save_training_checkpoint(path, state: TrainState, net_config: NetworkConfig,
                             train_config: TrainConfig) -> None:
    extra = {f"adam.m/{n}": a for n, a in state.adam.m.items()}
    extra.update({f"adam.v/{n}": a for n, a in state.adam.v.items()})
    meta = {
        "step": state.step,
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
        "train_config": train_config.to_dict(),
    }
    checkpoint_save(state.params, net_config, path, extra_tensors=extra, extra_header=meta)


def load_training_checkpoint(path) -> tuple[TrainState, NetworkConfig, TrainConfig | None]:
    """Inverse of :func:`save_training_checkpoint`; resuming continues bit-for-bit."""
    header, params, extra = checkpoint_read(path)
    meta = header.get("meta", {})
    config = header["config"]
    adam = AdamState.zeros_like(params)
    for n in params.values:
        if f"adam.m/{n}" in extra:
            adam.m[n] = extra[f"adam.m/{n}"].copy()
            adam.v[n] = extra[f"adam.v/{n}"].copy()
    adam.step = int(meta.get("adam_step", 0))
    rng = np.random.default_rng()
    if "rng_state" in meta:
        rng.bit_generator.state = meta["rng_state"]
    tc = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else None
    return TrainState(params, adam, rng, int(meta.get("step", 0))), config, tc


def draw_sample(dataset, rng, train_config: TrainConfig, lambda0="exact"):
    """One training triple ``(target, x_u, kspace)`` drawn from ``dataset``."""
    x = dataset[int(rng.integers(len(dataset)))]
    if train_config.augment:
        x = augment(x, rng, train_config.augment_config)
    if train_config.patch_width is not None and train_config.patch_width < x.shape[-1]:
        x = extract_patch(x, train_config.patch_width, rng)
    T, H, W = x.shape
    mask = ks.generate_mask(H, W, T, train_config.acceleration, train_config.sigma_fraction,
                            seed=int(rng.integers(2 ** 63)))
    x_u, kd = ks.undersample(x, mask, lambda0)
    return x, x_u, kd


def make_eval_set(sequences, acceleration: float, seed: int, sigma_fraction: float = 1 / 6,
                  lambda0="exact"):
    """Fixed ``(target, x_u, kspace)`` triples on full sequences for validation/testing."""
    out = []
    for i, x in enumerate(sequences):
        T, H, W = x.shape
        mask = ks.generate_mask(H, W, T, acceleration, sigma_fraction, seed=[seed, i])
        x_u, kd = ks.undersample(x, mask, lambda0)
        out.append((x, x_u, kd))
    return out


def evaluate_psnr(eval_set, config: NetworkConfig, params: ParameterStore, n_iter: int | None = None) -> float:
    vals = []
    for x, x_u, kd in eval_set:
        rec = forward(x_u, kd, config, params, n_iter=n_iter).x_rec
        vals.append(metrics.psnr(rec, x))
    return float(np.mean(vals))


LOG_COLUMNS = ("step", "train_loss", "val_psnr", "wall_time_s")


def train_loop(
    dataset,
    net_config: NetworkConfig,
    train_config: TrainConfig,
    out_dir=None,
    val_set=None,
    state: TrainState | None = None,
    callback: Callable[[TrainState, float], None] | None = None,
) -> TrainState:
    """Train for ``train_config.max_steps`` steps (continuing from ``state`` if given).

    ``dataset`` is a list of complex ``(T, H, W)`` sequences; ``val_set`` is a
    list of ``(target, x_u, kspace)`` triples (see :func:`make_eval_set`).
    With ``out_dir`` the metrics CSV and ``checkpoint.ckpt`` are written there.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if state is None:
        state = new_state(net_config, train_config)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "log.csv"
        fresh = state.step == 0 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fresh:
            writer.writeheader()
    ckpt = out / "checkpoint.ckpt" if out is not None else None
    lambda0 = net_config.dc_mode
    t0 = time.perf_counter()
    last_good = None
    try:
        while state.step < train_config.max_steps:
            rng_before = copy.deepcopy(state.rng) if ckpt is not None else None
            batch = [draw_sample(dataset, state.rng, train_config, lambda0) for _ in range(train_config.batch_size)]
            x_t = np.stack([b[0] for b in batch])
            x_u = np.stack([b[1] for b in batch])
            kd = ks.KSpaceData(np.stack([b[2].samples for b in batch]),
                               np.stack([b[2].mask for b in batch]), lambda0)
            loss = loss_and_grad(state.params, net_config, x_u, kd, x_t)
            if not math.isfinite(loss):
                if ckpt is not None and last_good is not None:
                    save_training_checkpoint(ckpt, last_good, net_config, train_config)
                raise TrainingDiverged(
                    f"non-finite loss at step {state.step + 1}; last good checkpoint kept at {ckpt}"
                )
            if ckpt is not None:
                last_good = TrainState(state.params.copy(), AdamState(
                    {n: a.copy() for n, a in state.adam.m.items()},
                    {n: a.copy() for n, a in state.adam.v.items()}, state.adam.step),
                    rng_before, state.step)
            grads = clip_gradients(state.params.grads, train_config.clip)
            adam_step(state.params.values, grads, state.adam, train_config, learning_rate_at(train_config, state.step))
            state.step += 1
            row = {"step": state.step, "train_loss": loss, "val_psnr": "",
                   "wall_time_s": round(time.perf_counter() - t0, 3)}
            if val_set and train_config.val_every and state.step % train_config.val_every == 0:
                row["val_psnr"] = evaluate_psnr(val_set, net_config, state.params)
                log.info("step %d loss %.3e val_psnr %.2f dB", state.step, loss, row["val_psnr"])
            state.log.append(row)
            if writer is not None:
                writer.writerow(row)
            if ckpt is not None and train_config.checkpoint_every and state.step % train_config.checkpoint_every == 0:
                save_training_checkpoint(ckpt, state, net_config, train_config)
            if callback is not None:
                callback(state, loss)
    finally:
        if writer is not None:
            fh.close()
    if ckpt is not None:
        save_training_checkpoint(ckpt, state, net_config, train_config)
    return state
