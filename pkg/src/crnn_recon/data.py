"""Synthetic dynamic phantoms, the ``.cseq`` tensor container, patching and
augmentation.

The phantoms stand in for cardiac cine data: a large, smoothly textured
static body plus a few small ellipses that pulse and drift periodically over
the T frames, multiplied by a smooth phase map so every frame is genuinely
complex.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"CSEQ0001"


@dataclass
class PhantomSpec:
    T: int = 8
    H: int = 64
    W: int = 64
    n_moving: int = 3
    motion_amplitude: float = 0.25
    texture_scale: float = 0.03
    phase_smoothness: float = 0.25
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_field(rng, shape, sigma_px):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(sigma_px, 0.5), mode="wrap")
    f -= f.mean()
    return f / (np.abs(f).max() + 1e-12)


def _soft_ellipse(yy, xx, cy, cx, ry, rx, angle, edge):
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    r = np.sqrt(u ** 2 + v ** 2)
    # edge is in units of normalised radius
    return 1.0 / (1.0 + np.exp((r - 1.0) / edge))


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Complex sequence of shape ``(T, H, W)`` with magnitude in ``[0, 1]``."""
    if spec.T < 2:
        raise ValueError(f"phantom needs T >= 2, got {spec.T}")
    if spec.H < 8 or spec.W < 8:
        raise ValueError(f"phantom frame too small: {spec.H}x{spec.W}")
    if spec.n_moving < 0 or spec.motion_amplitude < 0:
        raise ValueError("n_moving and motion_amplitude must be nonnegative")
    rng = np.random.default_rng(spec.seed)
    T, H, W = spec.T, spec.H, spec.W
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    edge = 0.6 / min(H, W)

    # static anatomy
    body_ry, body_rx = rng.uniform(0.7, 0.85), rng.uniform(0.65, 0.85)
    body = _soft_ellipse(yy, xx, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                         body_ry, body_rx, rng.uniform(-0.3, 0.3), edge / 0.8)
    texture = _smooth_field(rng, (H, W), spec.texture_scale * min(H, W))
    static = body * (0.4 + 0.15 * texture)
    for _ in range(10):
        ry, rx = rng.uniform(0.04, 0.18, size=2)
        organ = _soft_ellipse(yy, xx, rng.uniform(-0.55, 0.55), rng.uniform(-0.55, 0.55),
                              ry, rx, rng.uniform(0, np.pi), edge / min(ry, rx))
        static = static + body * organ * rng.uniform(-0.3, 0.35)

    # dynamic region near the centre: periodic with period T
    frames = np.repeat(static[None], T, axis=0)
    t = np.arange(T)
    for _ in range(spec.n_moving):
        cy, cx = rng.uniform(-0.25, 0.25, size=2)
        ry, rx = rng.uniform(0.1, 0.2, size=2)
        angle = rng.uniform(0, np.pi)
        intensity = rng.uniform(0.35, 0.55)
        phase0 = rng.uniform(0, 2 * np.pi)
        drift = rng.uniform(-1, 1, size=2)
        for ti in t:
            s = np.sin(2 * np.pi * ti / T + phase0)
            a = spec.motion_amplitude
            blob = _soft_ellipse(yy, xx, cy + 0.5 * a * ry * drift[0] * s, cx + 0.5 * a * rx * drift[1] * s,
                                 ry * (1 + a * s), rx * (1 + a * s), angle, edge / min(ry, rx))
            frames[ti] += intensity * blob

    mag = np.clip(frames, 0, None)
    mag /= mag.max()
    phase = (np.pi / 2) * _smooth_field(rng, (H, W), spec.phase_smoothness * min(H, W))
    return (mag * np.exp(1j * phase)[None]).astype(np.complex64)


# --------------------------------------------------------------------------
# tensor container


class ContainerError(ValueError):
    pass


def save_tensor(path, data: np.ndarray) -> None:
    """Write ``data`` as a ``.cseq`` record (complex data stored interleaved f32)."""
    data = np.asarray(data)
    if np.iscomplexobj(data):
        layout = "complex-interleaved"
        payload = np.ascontiguousarray(data, dtype="<c8").tobytes()
    else:
        layout = "real"
        payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    header = json.dumps(
        {"shape": list(data.shape), "dtype": "f32", "layout": layout, "endian": "little"}
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)
    tmp.replace(path)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise ContainerError(f"{path}: truncated before header length")
        (n,) = struct.unpack("<I", raw_len)
        raw = f.read(n)
        if len(raw) != n:
            raise ContainerError(f"{path}: truncated header ({len(raw)} of {n} bytes)")
        try:
            header = json.loads(raw.decode("utf-8"))
            shape = tuple(int(s) for s in header["shape"])
            layout = header["layout"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ContainerError(f"{path}: invalid header ({e})") from None
        if header.get("dtype") != "f32" or header.get("endian") != "little":
            raise ContainerError(f"{path}: unsupported dtype/endian {header.get('dtype')}/{header.get('endian')}")
        if layout not in ("complex-interleaved", "real"):
            raise ContainerError(f"{path}: unknown layout {layout!r}")
        if any(s < 0 for s in shape):
            raise ContainerError(f"{path}: negative dimension in shape {shape}")
        expected = int(np.prod(shape)) * 4 * (2 if layout == "complex-interleaved" else 1)
        payload = f.read()
    if len(payload) != expected:
        raise ContainerError(
            f"{path}: payload is {len(payload)} bytes but shape {list(shape)} ({layout}) needs {expected}"
        )
    dtype = "<c8" if layout == "complex-interleaved" else "<f4"
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


# --------------------------------------------------------------------------
# dataset directories: <root>/seq_<idx>.cseq plus manifest.json


def write_dataset(root, sequences, splits: dict[str, list[int]], meta: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i, seq in enumerate(sequences):
        name = f"seq_{i:04d}.cseq"
        save_tensor(root / name, seq)
        files.append(name)
    manifest = {"files": files, "splits": splits, "meta": meta or {}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{root}: no manifest.json (not a dataset directory)")
    return json.loads(path.read_text())


def load_split(root, split: str) -> list[np.ndarray]:
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"{root}: manifest has no split {split!r} (have {sorted(manifest['splits'])})")
    return [load_tensor(Path(root) / manifest["files"][i]) for i in manifest["splits"][split]]


# --------------------------------------------------------------------------
# patches and augmentation


def extract_patch(x: np.ndarray, patch_width: int, rng) -> np.ndarray:
    """Random contiguous window of ``patch_width`` along the last (frequency-encoding) axis."""
    W = x.shape[-1]
    if patch_width > W or patch_width < 1:
        raise ValueError(f"patch_width {patch_width} must be in [1, {W}]")
    start = int(rng.integers(0, W - patch_width + 1))
    return x[..., start:start + patch_width]


@dataclass
class AugmentConfig:
    max_rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.95, 1.05)
    max_translation_px: float = 4.0
    elastic_prob: float = 0.5
    elastic_sigma_px: float = 8.0
    elastic_max_px: float = 3.0


def warp(
    x: np.ndarray,
    rotation_deg: float = 0.0,
    scale: float = 1.0,
    translation: tuple[float, float] = (0.0, 0.0),
    displacement: np.ndarray | None = None,
) -> np.ndarray:
    """Apply one affine map (about the frame centre) and an optional
    displacement field ``(2, H, W)`` to every frame, bilinearly.

    Output pixel ``p`` samples the input at ``A^-1 (p - c - translation) + c + displacement(p)``;
    pixels mapped outside the frame read zero.
    """
    H, W = x.shape[-2:]
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    cy, cx = (H - 1) / 2, (W - 1) / 2
    th = np.deg2rad(rotation_deg)
    c, s = np.cos(th), np.sin(th)
    dy = yy - cy - translation[0]
    dx = xx - cx - translation[1]
    src_y = (c * dy + s * dx) / scale + cy
    src_x = (-s * dy + c * dx) / scale + cx
    if displacement is not None:
        src_y = src_y + displacement[0]
        src_x = src_x + displacement[1]
    coords = np.stack([src_y, src_x])
    flat = x.reshape((-1, H, W))
    out = np.empty(flat.shape, dtype=np.result_type(x.dtype, np.complex64) if np.iscomplexobj(x) else x.dtype)
    for i, frame in enumerate(flat):
        if np.iscomplexobj(frame):
            re = ndimage.map_coordinates(frame.real, coords, order=1, mode="constant", cval=0.0)
            im = ndimage.map_coordinates(frame.imag, coords, order=1, mode="constant", cval=0.0)
            out[i] = re + 1j * im
        else:
            out[i] = ndimage.map_coordinates(frame, coords, order=1, mode="constant", cval=0.0)
    return out.reshape(x.shape)


def augment(x: np.ndarray, rng, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random affine (and sometimes elastic) warp shared by all frames."""
    H, W = x.shape[-2:]
    rot = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
    scale = rng.uniform(*config.scale_range)
    shift = rng.uniform(-config.max_translation_px, config.max_translation_px, size=2)
    displacement = None
    if config.elastic_max_px > 0 and rng.uniform() < config.elastic_prob:
        field = np.stack([
            ndimage.gaussian_filter(rng.standard_normal((H, W)), config.elastic_sigma_px, mode="reflect")
            for _ in range(2)
        ])
        peak = np.abs(field).max()
        if peak > 0:
            displacement = field * (config.elastic_max_px * rng.uniform() / peak)
    if rot == 0 and scale == 1 and not shift.any() and displacement is None:
        return x.copy()
    return warp(x, rot, scale, (shift[0], shift[1]), displacement)
