"""Test-time training engine: fine-tune on a keyframe, then predict."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import NumericError, Tape, Tensor
from .metrics import CostLedger
from .objectives import SS_VARIANTS, ss_objective
from .ymodel import Checkpoint, MaskSpec, ModelParams, predict_depth, restore

MODES = ("scratch", "warm")
# tuned for this network size; larger steps overshoot within a 16-step episode
DEFAULT_TTT_LR = 3e-4

_GROUPS = {
    "plain_ss": ("theta_E", "theta_R"),
    "uss_mae": ("theta_E", "theta_SS"),
    "combined": ("theta_E", "theta_SS", "theta_R"),
}


class EpisodeAborted(NumericError):
    """A TTT episode hit a non-finite value; parameters were rolled back."""

    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"TTT episode on frame {frame_index} aborted: {cause}")
        self.frame_index = frame_index


class StreamOrderError(ValueError):
    pass


@dataclass(frozen=True)
class TTTConfig:
    variant: str = "uss_mae"
    steps: int = 16
    lr: float = DEFAULT_TTT_LR
    mode: str = "scratch"
    mask_spec: MaskSpec = MaskSpec()

    def __post_init__(self):
        if self.variant not in SS_VARIANTS:
            raise ValueError(f"variant must be one of {SS_VARIANTS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.steps < 0 or int(self.steps) != self.steps:
            raise ValueError("steps must be a non-negative integer")
        if not self.lr >= 0.0:
            raise ValueError("lr must be non-negative")

    @property
    def groups(self) -> tuple[str, ...]:
        return _GROUPS[self.variant]


@functools.lru_cache(maxsize=8192)
def step_mask(mask_spec: MaskSpec, frame_index: int, step: int) -> MaskSpec:
    seed = int(np.random.SeedSequence([mask_spec.seed, int(frame_index), int(step)]).generate_state(1)[0])
    return mask_spec.with_seed(seed)


@dataclass
class AdapterState:
    base_checkpoint: Checkpoint
    live_params: ModelParams = None
    last_keyframe: int | None = None
    ledger: CostLedger = field(default_factory=CostLedger)
    last_frame: int | None = None

    def __post_init__(self):
        if self.live_params is None:
            self.live_params = restore(self.base_checkpoint)


def predict(x, state: AdapterState) -> np.ndarray:
    x = x if isinstance(x, Tensor) else Tensor(x)
    state.ledger.add(forwards=1)
    return predict_depth(x, state.live_params).data


def ttt_episode(frame, config: TTTConfig, state: AdapterState, steps: int | None = None) -> list[float]:
    """Run Q Adam steps on the self-supervised loss; returns the per-step losses."""
    q = config.steps if steps is None else int(steps)
    if q == 0:
        return []
    params = state.live_params
    backup = params.arrays()
    if config.mode == "scratch":
        restore(state.base_checkpoint, into=params)
    trainable = [t for g in config.groups for t in params.group(g)]
    opt = gc.Adam(trainable, config.lr)
    x = Tensor(frame.x)
    losses = []
    try:
        for k in range(q):
            with Tape() as tape:
                loss = ss_objective(x, params, step_mask(config.mask_spec, frame.index, k), config.variant)
            grads = tape.backward(loss, trainable)
            state.ledger.add(forwards=1, backwards=1)
            losses.append(loss.item())
            opt.step(grads)
    except NumericError as exc:
        params.load_arrays(backup)
        raise EpisodeAborted(frame.index, exc) from exc
    state.last_keyframe = frame.index
    return losses


@dataclass(frozen=True)
class FrameResult:
    index: int
    y_hat: np.ndarray
    keyframe: bool
    losses: tuple[float, ...]


def process_frame(frame, is_keyframe: bool, config: TTTConfig, state: AdapterState,
                  steps: int | None = None) -> FrameResult:
    if state.last_frame is not None and frame.index <= state.last_frame:
        raise StreamOrderError(f"frame {frame.index} arrived after frame {state.last_frame}")
    state.last_frame = frame.index
    losses = ttt_episode(frame, config, state, steps) if is_keyframe else []
    y_hat = predict(frame.x, state)
    state.ledger.frames_processed += 1
    return FrameResult(frame.index, y_hat, bool(is_keyframe), tuple(losses))
