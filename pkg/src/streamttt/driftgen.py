"""Deterministic synthetic (image, depth) streams under drifting rendering
conditions.

Every frame is a fresh random scene; what stays coherent over time is the
domain (illumination gain, fog, sensor noise), which follows a piecewise
schedule of linear ramps, holds and abrupt steps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .gradcore import Tensor
from .ymodel import D_MAX, D_MIN, EDGE

N_COMPONENTS = 6
# cosine frequencies are drawn from {-MAX_FREQ..MAX_FREQ}^2 minus the origin
MAX_FREQ = 2
AMPLITUDE_RANGE = (0.2, 0.8)
FOG_LEVEL = 0.6
# inverse depth is normalized so that depth NEAR_DEPTH maps to 1 and D_MAX to 0
NEAR_DEPTH = 1.0


@dataclass(frozen=True)
class DomainParams:
    gain: float = 1.0
    fog: float = 0.0
    noise: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.gain <= 1.0:
            raise ValueError(f"gain {self.gain} outside (0, 1]")
        if not 0.0 <= self.fog < 1.0:
            raise ValueError(f"fog {self.fog} outside [0, 1)")
        if not 0.0 <= self.noise <= 0.3:
            raise ValueError(f"noise {self.noise} outside [0, 0.3]")

    def lerp(self, other: "DomainParams", a: float) -> "DomainParams":
        return DomainParams(self.gain + a * (other.gain - self.gain),
                            self.fog + a * (other.fog - self.fog),
                            self.noise + a * (other.noise - self.noise))


SOURCE = DomainParams(1.0, 0.0, 0.02)


@dataclass(frozen=True)
class Segment:
    duration: int
    start: DomainParams
    end: DomainParams
    interpolation: str = "hold"

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("segment duration must be positive")
        if self.interpolation not in ("linear", "hold", "step"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.interpolation == "step" and self.duration != 1:
            raise ValueError("a step segment lasts exactly one frame")

    def at(self, k: int) -> DomainParams:
        if self.interpolation == "hold":
            return self.start
        if self.interpolation == "step":
            return self.end
        return self.start.lerp(self.end, k / self.duration)


@dataclass(frozen=True)
class DriftSchedule:
    segments: tuple[Segment, ...]
    name: str = "custom"

    @property
    def length(self) -> int:
        return sum(s.duration for s in self.segments)

    def domain_at(self, t: int) -> DomainParams:
        if t < 0:
            raise IndexError(t)
        for seg in self.segments:
            if t < seg.duration:
                return seg.at(t)
            t -= seg.duration
        raise IndexError("frame index beyond the end of the schedule")

    def boundaries(self) -> list[int]:
        """Start frame of each segment."""
        out, t = [], 0
        for seg in self.segments:
            out.append(t)
            t += seg.duration
        return out


@dataclass(frozen=True)
class Frame:
    index: int
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    domain: DomainParams

    def public(self) -> "FrameView":
        return FrameView(self.index, self.x, self.y)


@dataclass(frozen=True)
class FrameView:
    """What the adapter and scheduler may see: no domain parameters."""
    index: int
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def x_tensor(self) -> Tensor:
        return Tensor(self.x)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def gen_depth_field(seed) -> np.ndarray:
    """Smooth random depth map of shape (16, 16) inside (D_MIN, D_MAX)."""
    rng = np.random.default_rng(seed)
    rr, cc = np.meshgrid(np.arange(EDGE), np.arange(EDGE), indexing="ij")
    freqs = [(u, v) for u in range(-MAX_FREQ, MAX_FREQ + 1) for v in range(-MAX_FREQ, MAX_FREQ + 1)
             if (u, v) != (0, 0)]
    pick = rng.choice(len(freqs), size=N_COMPONENTS, replace=False)
    amps = rng.uniform(*AMPLITUDE_RANGE, size=N_COMPONENTS)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=N_COMPONENTS)
    field_ = np.zeros((EDGE, EDGE))
    for k, a, ph in zip(pick, amps, phases):
        u, v = freqs[k]
        field_ += a * np.cos(2.0 * np.pi * (u * rr + v * cc) / EDGE + ph)
    return D_MIN + (D_MAX - D_MIN) * _sigmoid(field_)


def normalized_inverse_depth(y: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.asarray(y, dtype=np.float64)
    return (inv - 1.0 / D_MAX) / (1.0 / NEAR_DEPTH - 1.0 / D_MAX)


def render(y: np.ndarray, domain: DomainParams, seed) -> np.ndarray:
    """Image in [0, 1]; near surfaces are bright."""
    s = normalized_inverse_depth(y)
    eta = np.random.default_rng(seed).standard_normal(np.shape(y))
    x = domain.gain * (1.0 - domain.fog) * s + domain.fog * FOG_LEVEL + domain.noise * eta
    return np.clip(x, 0.0, 1.0)


def frame_seeds(seed: int, index: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    scene, noise = np.random.SeedSequence([int(seed), int(index)]).spawn(2)
    return scene, noise


def make_frame(schedule: DriftSchedule, seed: int, index: int) -> Frame:
    domain = schedule.domain_at(index)
    scene_seed, noise_seed = frame_seeds(seed, index)
    y = gen_depth_field(scene_seed)
    x = render(y, domain, noise_seed)
    return Frame(index, x.reshape(-1), y.reshape(-1), domain)


def make_stream(schedule: DriftSchedule, seed: int, length: int, start: int = 0) -> Iterator[Frame]:
    if length < 0:
        raise ValueError("length must be non-negative")
    if start + length > schedule.length:
        raise ValueError(f"schedule covers {schedule.length} frames, {start + length} requested")
    for t in range(start, start + length):
        yield make_frame(schedule, seed, t)


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

PRESETS = ("source", "night", "foggy", "rainy", "mixed")
RAMP, HOLD = 200, 200
SOURCE_LENGTH = 10 ** 9

NIGHT = replace(SOURCE, gain=0.25)
FOGGY = replace(SOURCE, fog=0.7)
RAINY = replace(SOURCE, noise=0.25)


def _ramp_then_hold(target: DomainParams, name: str) -> DriftSchedule:
    return DriftSchedule((Segment(RAMP, SOURCE, target, "linear"),
                          Segment(HOLD, target, target, "hold")), name)


def preset(name: str) -> DriftSchedule:
    if name == "source":
        return DriftSchedule((Segment(SOURCE_LENGTH, SOURCE, SOURCE, "hold"),), name)
    if name == "night":
        return _ramp_then_hold(NIGHT, name)
    if name == "foggy":
        return _ramp_then_hold(FOGGY, name)
    if name == "rainy":
        return _ramp_then_hold(RAINY, name)
    if name == "mixed":
        return DriftSchedule((
            Segment(100, SOURCE, SOURCE, "hold"),
            Segment(1, SOURCE, FOGGY, "step"),
            Segment(150, FOGGY, FOGGY, "hold"),
            Segment(100, FOGGY, SOURCE, "linear"),
            Segment(1, SOURCE, NIGHT, "step"),
            Segment(150, NIGHT, NIGHT, "hold"),
        ), name)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def default_length(name: str) -> int:
    return 500 if name == "source" else preset(name).length


# --------------------------------------------------------------------------
# Frame dump
# --------------------------------------------------------------------------

DUMP_MAGIC = b"UT3S"


def dump_stream(path, frames: list[Frame], seed: int, preset_name: str) -> Path:
    """Header (magic, edge, length, seed, name) then x and y per frame, all little-endian."""
    path = Path(path)
    name = preset_name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<IIQI", EDGE, len(frames), int(seed), len(name)))
        fh.write(name)
        for f in frames:
            fh.write(np.asarray(f.x, dtype="<f8").tobytes())
            fh.write(np.asarray(f.y, dtype="<f8").tobytes())
    return path


def load_stream_dump(path) -> tuple[dict, list[FrameView]]:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a stream dump")
    edge, length, seed, name_len = struct.unpack_from("<IIQI", raw, 4)
    off = 4 + struct.calcsize("<IIQI")
    name = raw[off:off + name_len].decode("utf-8")
    off += name_len
    n = edge * edge
    frames = []
    for t in range(length):
        x = np.frombuffer(raw, "<f8", n, off).astype(np.float64)
        off += 8 * n
        y = np.frombuffer(raw, "<f8", n, off).astype(np.float64)
        off += 8 * n
        frames.append(FrameView(t, x, y))
    return {"edge": edge, "length": length, "seed": seed, "preset": name}, frames
