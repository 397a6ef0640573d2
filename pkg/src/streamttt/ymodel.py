"""Y-shaped regression network: shared encoder, depth head, split
uncertainty head and a plain reconstruction head.

Activations are row vectors of shape ``(1, n)`` internally; public functions
accept and return flat ``(n,)`` tensors.
"""

from __future__ import annotations

import functools
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

EDGE = 16
D_IN = EDGE * EDGE
HIDDEN = 128
LATENT = 64
D_MIN, D_MAX = 0.1, 10.0
LOGVAR_MIN, LOGVAR_MAX = -6.0, 6.0
# keeps saturated depths strictly inside (D_MIN, D_MAX) in float64
SIGMOID_EPS = 1e-12

MAGIC = b"UT3C"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class ModelParams:
    theta_E: list[Tensor]
    theta_T: list[Tensor]
    theta_SS: list[Tensor]
    theta_R: list[Tensor]

    GROUPS = ("theta_E", "theta_T", "theta_SS", "theta_R")

    def group(self, name: str) -> list[Tensor]:
        return getattr(self, name)

    def tensors(self) -> list[Tensor]:
        return [*self.theta_E, *self.theta_T, *self.theta_SS, *self.theta_R]

    def arrays(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tensors()]

    def load_arrays(self, arrays) -> None:
        ts = self.tensors()
        if len(arrays) != len(ts):
            raise CheckpointError(f"expected {len(ts)} tensors, got {len(arrays)}")
        for t, a in zip(ts, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != t.shape:
                raise CheckpointError(f"tensor shape {a.shape} does not match {t.shape}")
            t.data = a.copy()

    def copy(self) -> "ModelParams":
        def cp(ts):
            return [Tensor(t.data.copy(), requires_grad=True) for t in ts]
        return ModelParams(cp(self.theta_E), cp(self.theta_T), cp(self.theta_SS), cp(self.theta_R))

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.tensors(), other.tensors()
        return len(a) == len(b) and all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def _layer_shapes() -> dict[str, list[tuple[int, int]]]:
    # (fan_in, fan_out) per dense layer
    return {
        "theta_E": [(D_IN, HIDDEN), (HIDDEN, LATENT)],
        "theta_T": [(LATENT, HIDDEN), (HIDDEN, D_IN)],
        # shared hidden layer, then mean branch and log-variance branch
        "theta_SS": [(LATENT, HIDDEN), (HIDDEN, D_IN), (HIDDEN, D_IN)],
        "theta_R": [(LATENT, HIDDEN), (HIDDEN, D_IN)],
    }


def init_params(seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    groups = {}
    for name, layers in _layer_shapes().items():
        ts = []
        for fan_in, fan_out in layers:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            ts.append(Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True))
            ts.append(Tensor(np.zeros((1, fan_out)), requires_grad=True))
        groups[name] = ts
    return ModelParams(**groups)


def _row(x: Tensor, n: int) -> Tensor:
    if x.data.size != n:
        raise gc.ShapeError(f"expected {n} values, got shape {x.shape}")
    return x if x.shape == (1, n) else gc.reshape(x, (1, n))


def _dense(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return gc.add(gc.matmul(h, w), b)


def encode(x: Tensor, params: ModelParams) -> Tensor:
    w1, b1, w2, b2 = params.theta_E
    h = gc.tanh(_dense(_row(x, D_IN), w1, b1))
    return gc.reshape(gc.tanh(_dense(h, w2, b2)), (LATENT,))


def task_raw(z: Tensor, params: ModelParams) -> Tensor:
    w1, b1, w2, b2 = params.theta_T
    h = gc.tanh(_dense(_row(z, LATENT), w1, b1))
    return _dense(h, w2, b2)


def depth_from_raw(raw: Tensor) -> Tensor:
    s = gc.clamp(gc.sigmoid(raw), SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    return gc.reshape(gc.add(gc.mul(s, D_MAX - D_MIN), D_MIN), (D_IN,))


def task_head(z: Tensor, params: ModelParams) -> Tensor:
    """Depth prediction in (0.1, 10.0)."""
    return depth_from_raw(task_raw(z, params))


def ss_head_raw(z: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    w1, b1, wm, bm, wv, bv = params.theta_SS
    h = gc.tanh(_dense(_row(z, LATENT), w1, b1))
    return _dense(h, wm, bm), _dense(h, wv, bv)


def ss_head(z: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Returns (reconstruction in [0, 1], log-variance clamped to [-6, 6])."""
    mean_raw, lv_raw = ss_head_raw(z, params)
    recon = gc.reshape(gc.sigmoid(mean_raw), (D_IN,))
    log_var = gc.reshape(gc.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX), (D_IN,))
    return recon, log_var


def plain_head(z: Tensor, params: ModelParams) -> Tensor:
    w1, b1, w2, b2 = params.theta_R
    h = gc.tanh(_dense(_row(z, LATENT), w1, b1))
    return gc.reshape(gc.sigmoid(_dense(h, w2, b2)), (D_IN,))


def predict_depth(x: Tensor, params: ModelParams) -> Tensor:
    return task_head(encode(x, params), params)


# --------------------------------------------------------------------------
# Masking
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    patch_edge: int = 4
    mask_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.patch_edge <= 0 or EDGE % self.patch_edge:
            raise ValueError(f"patch_edge {self.patch_edge} must divide {EDGE}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1]")

    @property
    def n_patches(self) -> int:
        return (EDGE // self.patch_edge) ** 2

    @property
    def n_masked(self) -> int:
        return int(round(self.mask_ratio * self.n_patches))

    def with_seed(self, seed: int) -> "MaskSpec":
        return MaskSpec(self.patch_edge, self.mask_ratio, seed)


@functools.lru_cache(maxsize=8192)
def mask_pattern(spec: MaskSpec) -> np.ndarray:
    """Flat 0/1 array marking masked pixels (read-only; patterns are cached)."""
    per_side = EDGE // spec.patch_edge
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(spec.n_patches, size=spec.n_masked, replace=False)
    m = np.zeros((EDGE, EDGE))
    for k in chosen:
        r, c = divmod(int(k), per_side)
        m[r * spec.patch_edge:(r + 1) * spec.patch_edge, c * spec.patch_edge:(c + 1) * spec.patch_edge] = 1.0
    m = m.reshape(-1)
    m.setflags(write=False)
    return m


def apply_mask(x: Tensor, spec: MaskSpec) -> tuple[Tensor, Tensor]:
    if x.data.size != D_IN:
        raise gc.ShapeError(f"expected {D_IN} pixels, got shape {x.shape}")
    m = mask_pattern(spec)
    keep = Tensor._wrap((1.0 - m).reshape(x.shape))
    return gc.mul(x, keep), Tensor(m)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    tag: str
    arrays: tuple[np.ndarray, ...] = field(repr=False)
    created_at_frame: int | str = "train"

    def __post_init__(self):
        for a in self.arrays:
            a.setflags(write=False)


def snapshot(params: ModelParams, tag: str, created_at_frame: int | str = "train",
             registry: set | None = None) -> Checkpoint:
    """Immutable copy of parameter values (no gradient or optimizer state).

    Pass a per-run ``registry`` set to reject duplicate tags.
    """
    if registry is not None:
        if tag in registry:
            raise CheckpointError(f"checkpoint tag {tag!r} already used in this run")
        registry.add(tag)
    return Checkpoint(tag, tuple(params.arrays()), created_at_frame)


def restore(ckpt: Checkpoint, into: ModelParams | None = None) -> ModelParams:
    params = into if into is not None else init_params(0)
    params.load_arrays(ckpt.arrays)
    return params


def _encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    tag = ckpt.tag.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(tag)))
    buf.write(tag)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for a in ckpt.arrays:
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(_encode_checkpoint(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    version, tag_len = struct.unpack_from("<HI", raw, off)
    off += 6
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tag = raw[off:off + tag_len].decode("utf-8")
    off += tag_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64))
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(tag, tuple(arrays), "train")
