"""Depth error metrics and the hardware-independent compute ledger."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

METRIC_NAMES = ("abs_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def mean_of(cls, items) -> "DepthMetrics":
        """Unweighted mean of per-frame metrics."""
        items = list(items)
        if not items:
            raise ValueError("no metrics to aggregate")
        return cls(**{f.name: float(np.mean([getattr(m, f.name) for m in items])) for f in fields(cls)})


def depth_metrics(pred, target) -> DepthMetrics:
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64).reshape(-1)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if np.any(pred <= 0) or np.any(target <= 0):
        raise ValueError("depth metrics need strictly positive inputs")
    diff = pred - target
    ratio = np.maximum(pred / target, target / pred)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / target)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(target)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


@dataclass
class CostLedger:
    forward_count: int = 0
    backward_count: int = 0
    wall_clock_seconds: float = 0.0
    frames_processed: int = 0

    def add(self, forwards: int = 0, backwards: int = 0) -> None:
        if forwards < 0 or backwards < 0:
            raise ValueError("ledger counts only grow")
        self.forward_count += forwards
        self.backward_count += backwards

    def merge(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(self.forward_count + other.forward_count,
                          self.backward_count + other.backward_count,
                          self.wall_clock_seconds + other.wall_clock_seconds,
                          self.frames_processed + other.frames_processed)

    @property
    def units(self) -> int:
        return self.forward_count + 2 * self.backward_count


def cost_model(ledger: CostLedger) -> float:
    """(forwards + 2 * backwards) per processed frame."""
    if ledger.frames_processed <= 0:
        raise ValueError("no frames processed")
    return ledger.units / ledger.frames_processed


def expected_cost(frames: int, keyframes: int, steps: int, forwards_per_frame: int = 1) -> float:
    """Closed-form ledger cost for a run, used to cross-check the harness."""
    return (frames * forwards_per_frame + keyframes * 3 * steps) / frames


def finite(m: DepthMetrics) -> bool:
    return all(math.isfinite(v) for v in asdict(m).values())
