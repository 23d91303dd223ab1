"""CRNN-MRI: a recurrent reconstruction block interleaved with data consistency.

Each iteration runs a five-unit block on the current estimate, adds the block
output back (residual) and applies data consistency::

    x_rnn = x_rec + block(x_rec)
    x_rec = DC(x_rnn)

Recurrent units carry hidden state from one iteration to the next, and the
first unit of the full network also recurs bidirectionally over time.

Feature tensors are laid out ``(batch, T, channels, H, W)``; convolutions treat
``batch * T`` as the convolution batch.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kspace as ks
from .tensor import (
    ParameterStore,
    conv2d_backward,
    conv2d_forward,
    conv2d_input_grad,
    conv2d_weight_grad,
    he_init,
    relu,
)

VARIANTS = ("full", "iteration-only", "temporal-only")

# unit kinds
BCRNN = "bcrnn-t-i"
BCRNN_T = "bcrnn-t"
CRNN_I = "crnn-i"
CNN = "cnn"
CNN_OUT = "cnn-out"


@dataclass
class NetworkConfig:
    n_f: int = 64
    k: int = 3
    N: int = 10
    variant: str = "full"
    dc_mode: ks.Lambda0 = "exact"

    def __post_init__(self):
        if self.N < 1 or self.n_f < 1:
            raise ValueError(f"N and n_f must be >= 1, got N={self.N}, n_f={self.n_f}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got k={self.k}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        ks.check_lambda0(self.dc_mode)

    def layout(self) -> list["UnitSpec"]:
        nf = self.n_f
        if self.variant == "full":
            kinds = [BCRNN, CRNN_I, CRNN_I, CRNN_I]
        elif self.variant == "iteration-only":
            kinds = [CRNN_I, CRNN_I, CRNN_I, CRNN_I]
        else:
            kinds = [BCRNN_T, CNN, CNN, CNN]
        units = [UnitSpec(f"layer{i + 1}", kind, 2 if i == 0 else nf, nf) for i, kind in enumerate(kinds)]
        units.append(UnitSpec("layer5", CNN_OUT, nf, 2))
        return units

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: d[k] for k in ("n_f", "k", "N", "variant", "dc_mode") if k in d})


@dataclass(frozen=True)
class UnitSpec:
    name: str
    kind: str
    c_in: int
    c_out: int

    @property
    def recurrent_over_iterations(self) -> bool:
        return self.kind in (BCRNN, CRNN_I)

    def param_shapes(self, k: int) -> dict[str, tuple[int, ...]]:
        w_in = (self.c_out, self.c_in, k, k)
        w_hid = (self.c_out, self.c_out, k, k)
        shapes = {"input_weight": w_in}
        if self.kind in (BCRNN, BCRNN_T):
            shapes["time_weight"] = w_hid
        if self.recurrent_over_iterations:
            shapes["iter_weight"] = w_hid
        if self.kind in (BCRNN, BCRNN_T):
            shapes["bias_fwd"] = (self.c_out,)
            shapes["bias_bwd"] = (self.c_out,)
        else:
            shapes["bias"] = (self.c_out,)
        return shapes


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    out = {}
    for unit in config.layout():
        for role, shape in unit.param_shapes(config.k).items():
            out[f"{unit.name}.{role}"] = shape
    return out


def init_params(config: NetworkConfig, seed=0, dtype=np.float32, recurrent_gain: float = 0.3,
                output_gain: float = 0.1) -> ParameterStore:
    """He-initialised weights, zero biases. Deterministic in ``seed``.

    Recurrent kernels (time and iteration) are scaled by ``recurrent_gain`` so
    hidden states do not blow up across frames and iterations, and the output
    layer by ``output_gain`` so an untrained network stays close to the
    zero-filled input.
    """
    ss = np.random.SeedSequence(seed)
    shapes = param_shapes(config)
    children = ss.spawn(len(shapes))
    out_unit = config.layout()[-1].name
    store = ParameterStore()
    for (name, shape), child in zip(shapes.items(), children):
        if len(shape) == 1:
            store.add(name, np.zeros(shape, dtype=dtype))
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        w = he_init(shape, fan_in, child, dtype=dtype)
        role = name.split(".", 1)[1]
        if role in ("time_weight", "iter_weight"):
            w *= recurrent_gain
        elif name.startswith(out_unit + "."):
            w *= output_gain
        store.add(name, w)
    return store


def check_params(params: ParameterStore, config: NetworkConfig) -> None:
    expected = param_shapes(config)
    got = params.shapes()
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(n for n in set(expected) & set(got) if expected[n] != got[n])
        raise ValueError(
            f"parameters do not match config ({config.variant}, n_f={config.n_f}, k={config.k}): "
            f"missing={missing} extra={extra} wrong_shape={wrong}"
        )


# --------------------------------------------------------------------------
# framewise convolution helpers on (B, T, C, H, W)


def _conv_bt(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    B, T = h.shape[:2]
    out = conv2d_forward(h.reshape((B * T,) + h.shape[2:]), w)
    return out.reshape((B, T) + out.shape[1:])


def _conv_bt_backward(g: np.ndarray, h: np.ndarray, w: np.ndarray):
    B, T = g.shape[:2]
    g2 = g.reshape((B * T,) + g.shape[2:])
    h2 = h.reshape((B * T,) + h.shape[2:])
    gi, gw, _ = conv2d_backward(g2, h2, w)
    return gi.reshape(h.shape), gw


def _bias(b: np.ndarray) -> np.ndarray:
    return b.reshape(1, 1, -1, 1, 1)


def _check_pair(h_in: np.ndarray, h_prev: np.ndarray | None, n_f: int) -> None:
    if h_in.ndim != 5:
        raise ValueError(f"expected a (batch, T, C, H, W) tensor, got shape {h_in.shape}")
    if h_prev is None:
        return
    if h_prev.shape[:2] != h_in.shape[:2] or h_prev.shape[3:] != h_in.shape[3:] or h_prev.shape[2] != n_f:
        raise ValueError(
            f"hidden state shape {h_prev.shape} does not match input {h_in.shape} with n_f={n_f}"
        )


# --------------------------------------------------------------------------
# CRNN-i and plain CNN units


def crnn_i_step(h_in, h_prev, input_weight, iter_weight, bias):
    """``relu(W_l * h_in + W_i * h_prev + b)`` framewise; returns ``(out, cache)``.

    ``h_prev`` may be ``None`` (zero hidden state, or a unit without iteration
    recurrence); ``iter_weight`` is then unused.
    """
    _check_pair(h_in, h_prev, input_weight.shape[0])
    pre = _conv_bt(h_in, input_weight) + _bias(bias)
    if h_prev is not None:
        pre += _conv_bt(h_prev, iter_weight)
    out = relu(pre)
    return out, (h_in, h_prev, out)


def crnn_i_backward(grad_out, cache, input_weight, iter_weight):
    """Returns ``(grad_h_in, grad_h_prev, grads)`` with grads keyed by role."""
    h_in, h_prev, out = cache
    g = grad_out * (out > 0)
    grad_in, gw_in = _conv_bt_backward(g, h_in, input_weight)
    grads = {"input_weight": gw_in, "bias": g.sum(axis=(0, 1, 3, 4))}
    grad_prev = None
    if h_prev is not None:
        grad_prev, grads["iter_weight"] = _conv_bt_backward(g, h_prev, iter_weight)
    elif iter_weight is not None:
        grads["iter_weight"] = np.zeros_like(iter_weight)
    return grad_in, grad_prev, grads


def conv_out_step(h_in, input_weight, bias):
    return _conv_bt(h_in, input_weight) + _bias(bias)


# --------------------------------------------------------------------------
# BCRNN-t-i unit


def bcrnn_ti_step(h_in, h_prev, input_weight, time_weight, iter_weight, bias_fwd, bias_bwd):
    """Bidirectional recurrence over time with an iteration-hidden input.

    Forward direction (t = 1..T) and backward direction (t = T..1) share the
    three convolution kernels and differ only in bias; the output is the sum of
    both directions. Temporal boundary states are zero; ``h_prev=None`` means
    the zero iteration state (or no iteration recurrence at all).
    """
    _check_pair(h_in, h_prev, input_weight.shape[0])
    # input and iteration terms are identical for both directions
    shared = _conv_bt(h_in, input_weight)
    if h_prev is not None:
        shared += _conv_bt(h_prev, iter_weight)
    T = h_in.shape[1]
    fwd = np.empty_like(shared)
    bwd = np.empty_like(shared)
    bf = bias_fwd.reshape(1, -1, 1, 1)
    bb = bias_bwd.reshape(1, -1, 1, 1)
    for t in range(T):
        pre = shared[:, t] + bf
        if t > 0:
            pre = pre + conv2d_forward(fwd[:, t - 1], time_weight)
        fwd[:, t] = relu(pre)
    for t in reversed(range(T)):
        pre = shared[:, t] + bb
        if t < T - 1:
            pre = pre + conv2d_forward(bwd[:, t + 1], time_weight)
        bwd[:, t] = relu(pre)
    return fwd + bwd, (h_in, h_prev, fwd, bwd)


def bcrnn_ti_backward(grad_out, cache, input_weight, time_weight, iter_weight):
    h_in, h_prev, fwd, bwd = cache
    T = h_in.shape[1]
    d_fwd = np.empty_like(fwd)
    d_bwd = np.empty_like(bwd)
    carry = None
    for t in reversed(range(T)):
        g = grad_out[:, t] if carry is None else grad_out[:, t] + carry
        d_fwd[:, t] = g * (fwd[:, t] > 0)
        carry = conv2d_input_grad(d_fwd[:, t], time_weight) if t > 0 else None
    carry = None
    for t in range(T):
        g = grad_out[:, t] if carry is None else grad_out[:, t] + carry
        d_bwd[:, t] = g * (bwd[:, t] > 0)
        carry = conv2d_input_grad(d_bwd[:, t], time_weight) if t < T - 1 else None

    k = time_weight.shape[-1]
    gw_time = np.zeros_like(time_weight)
    if T > 1:
        # pair each pre-activation gradient with the state it convolved
        g_pairs = np.concatenate([d_fwd[:, 1:], d_bwd[:, :-1]], axis=1)
        s_pairs = np.concatenate([fwd[:, :-1], bwd[:, 1:]], axis=1)
        B, P = g_pairs.shape[:2]
        gw_time = conv2d_weight_grad(
            g_pairs.reshape((B * P,) + g_pairs.shape[2:]),
            s_pairs.reshape((B * P,) + s_pairs.shape[2:]),
            k,
        )
    d_shared = d_fwd + d_bwd
    grad_in, gw_in = _conv_bt_backward(d_shared, h_in, input_weight)
    grads = {
        "input_weight": gw_in,
        "time_weight": gw_time,
        "bias_fwd": d_fwd.sum(axis=(0, 1, 3, 4)),
        "bias_bwd": d_bwd.sum(axis=(0, 1, 3, 4)),
    }
    grad_prev = None
    if h_prev is not None:
        grad_prev, grads["iter_weight"] = _conv_bt_backward(d_shared, h_prev, iter_weight)
    elif iter_weight is not None:
        grads["iter_weight"] = np.zeros_like(iter_weight)
    return grad_in, grad_prev, grads


# --------------------------------------------------------------------------
# full network


@dataclass
class ForwardResult:
    x_rec: np.ndarray
    # per-iteration reconstructions x_rec^(1..N) (only when recorded)
    iterations: list[np.ndarray] = field(default_factory=list)
    # activations[i][l]: output of unit l at iteration i (only when recorded)
    activations: list[list[np.ndarray]] = field(default_factory=list)
    cache: list | None = None
    kspace: ks.KSpaceData | None = None


def _unit_params(params: ParameterStore, unit: UnitSpec) -> dict[str, np.ndarray | None]:
    get = lambda role: params.values.get(f"{unit.name}.{role}")
    return {role: get(role) for role in
            ("input_weight", "time_weight", "iter_weight", "bias", "bias_fwd", "bias_bwd")}


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a complex (T, H, W) or (B, T, H, W) sequence, got shape {x.shape}")


def forward(
    x_u: np.ndarray,
    kspace: ks.KSpaceData,
    config: NetworkConfig,
    params: ParameterStore,
    n_iter: int | None = None,
    record: bool = False,
    keep_cache: bool = False,
) -> ForwardResult:
    """Reconstruct from the zero-filled sequence ``x_u`` (complex, (T,H,W) or (B,T,H,W)).

    ``n_iter`` defaults to ``config.N`` and may exceed it at test time.
    ``keep_cache`` retains what :func:`backward` needs.
    """
    n_iter = config.N if n_iter is None else n_iter
    if n_iter < 1:
        raise ValueError(f"number of iterations must be >= 1, got {n_iter}")
    check_params(params, config)
    units = config.layout()
    x, squeeze = _as_batch(x_u)
    if squeeze:
        kspace = ks.KSpaceData(kspace.samples[None], kspace.mask[None], kspace.lambda0)
    ks.check_broadcast(x.shape, kspace.samples.shape, "forward: input", "k-space")
    real_dtype = params.dtype
    x = x.astype(np.result_type(real_dtype, np.complex64))

    result = ForwardResult(x_rec=x, kspace=kspace)
    cache = [] if keep_cache else None
    hidden: list[np.ndarray | None] = [None] * len(units)
    x_rec = x
    for _ in range(n_iter):
        h = ks.to_channels(x_rec).astype(real_dtype)
        unit_caches = []
        acts = []
        for li, unit in enumerate(units):
            p = _unit_params(params, unit)
            if unit.kind == BCRNN or unit.kind == BCRNN_T:
                prev = hidden[li] if unit.kind == BCRNN else None
                h, c = bcrnn_ti_step(h, prev, p["input_weight"], p["time_weight"], p["iter_weight"],
                                     p["bias_fwd"], p["bias_bwd"])
            elif unit.kind == CRNN_I or unit.kind == CNN:
                prev = hidden[li] if unit.kind == CRNN_I else None
                h, c = crnn_i_step(h, prev, p["input_weight"], p["iter_weight"], p["bias"])
            else:
                c = h
                h = conv_out_step(h, p["input_weight"], p["bias"])
            if unit.recurrent_over_iterations:
                hidden[li] = h
            unit_caches.append(c)
            if record:
                acts.append(h)
        x_rnn = x_rec + ks.from_channels(h)
        x_rec = ks.data_consistency(x_rnn, kspace)
        if keep_cache:
            cache.append(unit_caches)
        if record:
            result.iterations.append(x_rec[0] if squeeze else x_rec)
            result.activations.append([a[0] for a in acts] if squeeze else acts)
    result.x_rec = x_rec[0] if squeeze else x_rec
    result.cache = cache
    return result


def backward(
    result: ForwardResult,
    grad_x_rec: np.ndarray,
    config: NetworkConfig,
    params: ParameterStore,
) -> np.ndarray:
    """Accumulate parameter gradients into ``params.grads``.

    ``grad_x_rec`` is the complex gradient ``dL/dRe + 1j * dL/dIm`` of the
    final reconstruction. Returns the same kind of gradient for ``x_u``.
    """
    if result.cache is None:
        raise ValueError("forward was run without keep_cache=True")
    units = config.layout()
    g_rec, squeeze = _as_batch(grad_x_rec)
    real_dtype = params.dtype
    d_hidden: list[np.ndarray | None] = [None] * len(units)
    for unit_caches in reversed(result.cache):
        g_rnn = ks.data_consistency_backward(g_rec, result.kspace)
        g = ks.to_channels(g_rnn).astype(real_dtype)
        for li in reversed(range(len(units))):
            unit = units[li]
            p = _unit_params(params, unit)
            c = unit_caches[li]
            if d_hidden[li] is not None:
                g = g + d_hidden[li]
            if unit.kind == CNN_OUT:
                gi, gw, gb = conv2d_backward(
                    g.reshape((-1,) + g.shape[2:]), c.reshape((-1,) + c.shape[2:]), p["input_weight"])
                grads = {"input_weight": gw, "bias": gb}
                g_in, g_prev = gi.reshape(c.shape), None
            elif unit.kind in (BCRNN, BCRNN_T):
                g_in, g_prev, grads = bcrnn_ti_backward(g, c, p["input_weight"], p["time_weight"],
                                                        p["iter_weight"])
            else:
                g_in, g_prev, grads = crnn_i_backward(g, c, p["input_weight"], p["iter_weight"])
            for role, gr in grads.items():
                params.accumulate(f"{unit.name}.{role}", gr)
            d_hidden[li] = g_prev
            g = g_in
        # residual path plus the block input path
        g_rec = g_rnn + ks.from_channels(g)
    return g_rec[0] if squeeze else g_rec


# --------------------------------------------------------------------------
# capacity


def count_parameters(config: NetworkConfig) -> tuple[int, dict[str, dict[str, int]]]:
    """Total learnable scalars and a per-unit, per-role breakdown."""
    breakdown: dict[str, dict[str, int]] = {}
    for unit in config.layout():
        roles = {role: int(np.prod(shape)) for role, shape in unit.param_shapes(config.k).items()}
        roles["total"] = sum(roles.values())
        breakdown[f"{unit.name} ({unit.kind})"] = roles
    return sum(r["total"] for r in breakdown.values()), breakdown


# --------------------------------------------------------------------------
# checkpoints: u32 header length, UTF-8 JSON header, raw little-endian f32

CHECKPOINT_FORMAT = "crnn-recon-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_save(
    params: ParameterStore,
    config: NetworkConfig,
    path,
    extra_tensors: dict[str, np.ndarray] | None = None,
    extra_header: dict | None = None,
) -> None:
    tensors = dict(params.values)
    for name, arr in (extra_tensors or {}).items():
        if name in tensors:
            raise ValueError(f"extra tensor name {name!r} collides with a parameter")
        tensors[name] = arr
    header = {
        "format": CHECKPOINT_FORMAT,
        "schema_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": [[n, list(params.values[n].shape)] for n in params.values],
        "extra": [[n, list(a.shape)] for n, a in (extra_tensors or {}).items()],
        "meta": extra_header or {},
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def checkpoint_read(path) -> tuple[dict, ParameterStore, dict[str, np.ndarray]]:
    """Return ``(header, params, extra_tensors)``; validates everything before returning."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    (n,) = struct.unpack("<I", raw[:4])
    if 4 + n > len(raw):
        raise CheckpointError(f"{path}: header length {n} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[4:4 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted checkpoint header ({e})") from None
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported schema_version {header.get('schema_version')} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        config = NetworkConfig.from_dict(header["config"])
        entries = [(n, tuple(s)) for n, s in header["params"]] + [(n, tuple(s)) for n, s in header["extra"]]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid checkpoint header ({e})") from None
    expected = param_shapes(config)
    declared = dict(entries[:len(header["params"])])
    if declared != expected:
        raise CheckpointError(f"{path}: parameter shapes {declared} do not match config {expected}")
    total = sum(int(np.prod(s)) for _, s in entries)
    payload = raw[4 + n:]
    if len(payload) != 4 * total:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {4 * total}")
    data = np.frombuffer(payload, dtype="<f4")
    offset = 0
    params = ParameterStore()
    extra = {}
    for i, (name, shape) in enumerate(entries):
        size = int(np.prod(shape))
        arr = data[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
        if i < len(header["params"]):
            params.add(name, arr)
        else:
            extra[name] = arr
    header["config"] = config
    return header, params, extra


def checkpoint_load(path) -> tuple[ParameterStore, NetworkConfig]:
    header, params, _ = checkpoint_read(path)
    return params, header["config"]
