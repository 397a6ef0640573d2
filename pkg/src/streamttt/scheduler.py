"""Keyframe policies and source-domain entropy calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .gradcore import Tensor
from .objectives import gaussian_entropy, ss_prediction
from .ymodel import Checkpoint, MaskSpec, ModelParams, restore

DEFAULT_QUANTILES = (0.0, 0.5, 0.75, 0.9, 0.95, 0.99, 1.0)
MIN_CALIBRATION_FRAMES = 50


class CalibrationError(ValueError):
    pass


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile of an already sorted sequence."""
    v = list(values)
    if not v:
        raise ValueError("quantile of an empty list")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q={q} outside [0, 1]")
    h = (len(v) - 1) * q
    lo = math.floor(h)
    if lo + 1 >= len(v):
        return float(v[-1])
    return float(v[lo] + (h - lo) * (v[lo + 1] - v[lo]))


@dataclass(frozen=True)
class EntropyStats:
    source_entropies: tuple[float, ...]
    kappa_bar: float
    v_kappa: float
    tau: dict = field(default_factory=dict)

    @classmethod
    def from_entropies(cls, entropies: Iterable[float], quantiles=DEFAULT_QUANTILES) -> "EntropyStats":
        s = tuple(sorted(float(e) for e in entropies))
        if not s:
            raise CalibrationError("no entropies")
        arr = np.asarray(s)
        v = float(arr.var())
        # equal values can leave a rounding residue in the variance
        if s[0] == s[-1] or not v > 0.0:
            raise CalibrationError("all source entropies are equal; threshold is unusable")
        return cls(s, float(arr.mean()), v, {float(q): quantile(s, q) for q in quantiles})

    def threshold(self, q: float) -> float:
        q = float(q)
        if q in self.tau:
            return self.tau[q]
        return quantile(self.source_entropies, q)

    def standardize(self, kappa: float) -> float:
        return standardize(kappa, self)


def standardize(kappa: float, stats: EntropyStats) -> float:
    """Centre by the source mean, divide by the source variance."""
    if not stats.v_kappa > 0.0:
        raise CalibrationError("source entropy variance must be positive")
    return (kappa - stats.kappa_bar) / stats.v_kappa


def entropy_mask(mask_spec: MaskSpec, frame_index: int) -> MaskSpec:
    """Fixed per-frame mask used whenever entropy is scored."""
    seed = int(np.random.SeedSequence([mask_spec.seed, int(frame_index), 0xE17]).generate_state(1)[0])
    return mask_spec.with_seed(seed)


def frame_entropy(params: ModelParams, x, mask_spec: MaskSpec, frame_index: int) -> float:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return gaussian_entropy(ss_prediction(x, params, entropy_mask(mask_spec, frame_index)))


def calibrate(frames, checkpoint: Checkpoint | ModelParams, mask_spec: MaskSpec = MaskSpec(),
              quantiles=DEFAULT_QUANTILES) -> EntropyStats:
    """Score every source validation frame with the frozen model."""
    params = checkpoint if isinstance(checkpoint, ModelParams) else restore(checkpoint)
    ents = [frame_entropy(params, f.x, mask_spec, f.index) for f in frames]
    if len(ents) < MIN_CALIBRATION_FRAMES:
        raise CalibrationError(f"need at least {MIN_CALIBRATION_FRAMES} frames, got {len(ents)}")
    return EntropyStats.from_entropies(ents, quantiles)


def save_stats(stats: EntropyStats, path) -> Path:
    lines = ["# source-domain entropy calibration",
             f"count = {len(stats.source_entropies)}",
             f"kappa_bar = {stats.kappa_bar:.17g}",
             f"v_kappa = {stats.v_kappa:.17g}"]
    lines += [f"tau {q!r} = {t:.17g}" for q, t in sorted(stats.tau.items())]
    lines += [f"entropy = {e:.17g}" for e in stats.source_entropies]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_stats(path) -> EntropyStats:
    kv, tau, ents = {}, {}, []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "entropy":
            ents.append(float(value))
        elif key.startswith("tau "):
            tau[float(key[4:])] = float(value)
        else:
            kv[key] = value
    if int(kv.get("count", -1)) != len(ents):
        raise CalibrationError(f"{path}: entropy count mismatch")
    return EntropyStats(tuple(ents), float(kv["kappa_bar"]), float(kv["v_kappa"]), tau)


# --------------------------------------------------------------------------
# Policies
# --------------------------------------------------------------------------

POLICY_KINDS = ("never", "always", "random", "uniform", "shallow", "uncertainty")


@dataclass(frozen=True)
class Policy:
    kind: str
    param: float | None = None
    seed: int = 0

    def __post_init__(self):
        k, p = self.kind, self.param
        if k not in POLICY_KINDS:
            raise ValueError(f"unknown policy {k!r}")
        if k in ("never", "always"):
            if p is not None:
                raise ValueError(f"{k} takes no parameter")
        elif p is None:
            raise ValueError(f"{k} needs a parameter")
        elif k in ("random", "uncertainty") and not 0.0 <= p <= 1.0:
            raise ValueError(f"{k} parameter {p} outside [0, 1]")
        elif k in ("uniform", "shallow") and (p < 1 or p != int(p)):
            raise ValueError(f"{k} parameter must be a positive integer")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "Policy":
        kind, _, arg = text.partition(":")
        kind = kind.strip()
        if not arg:
            return cls(kind, None, seed)
        value = float(arg)
        if kind in ("uniform", "shallow") and value == int(value):
            value = int(value)
        return cls(kind, value, seed)

    def label(self) -> str:
        if self.param is None:
            return self.kind
        return f"{self.kind}:{self.param:g}"

    @property
    def needs_entropy(self) -> bool:
        return self.kind == "uncertainty"

    def steps_override(self) -> int | None:
        return int(self.param) if self.kind == "shallow" else None


def _coin(seed: int, frame_index: int) -> float:
    # pure function of (seed, frame) so random(p) keyframe sets are nested in p
    return float(np.random.default_rng([int(seed), int(frame_index)]).random())


def decide(frame_index: int, entropy: float | None, policy: Policy, stats: EntropyStats | None = None) -> bool:
    k = policy.kind
    if k == "never":
        return False
    if k in ("always", "shallow"):
        return True
    if k == "random":
        return _coin(policy.seed, frame_index) < policy.param
    if k == "uniform":
        return frame_index % int(policy.param) == 0
    if entropy is None or stats is None:
        raise ValueError("uncertainty policy needs an entropy value and calibration stats")
    return entropy > stats.threshold(policy.param)
