"""Adaptive monitoring: dynamic skipping and per-class dynamic thresholds.

Skipping tracks the mean teacher score per frame against its exponential
moving average. Adaptation continues while the ratio ``lbar / lbar_ema`` stays
inside ``(1/delta_s, delta_s)`` and pauses otherwise.

Thresholds start at ``delta0`` for every class and move every frame toward
``epsilon * sqrt(mean class score)``, clamped to ``[delta_mini, delta_max]``.
A class with no detections in the frame keeps its threshold.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .toydet import NUM_CLASSES, Detection


class Decision(str, enum.Enum):
    ADAPT = "adapt"
    PAUSE = "pause"


@dataclass(frozen=True)
class MonitorConfig:
    beta_s: float = 0.7
    delta_s: float = 1.5
    beta_t: float = 0.95
    epsilon: float = 1.3
    delta0: float = 0.8
    delta_max: float = 0.9
    delta_mini: float = 0.7
    num_classes: int = NUM_CLASSES
    ema_on_pause: bool = True

    def validate(self) -> None:
        if not 0.0 < self.beta_s < 1.0:
            raise ValueError(f"beta_s must lie in (0, 1), got {self.beta_s}")
        if not 0.0 < self.beta_t < 1.0:
            raise ValueError(f"beta_t must lie in (0, 1), got {self.beta_t}")
        if not self.delta_s > 1.0:
            raise ValueError(f"delta_s must exceed 1, got {self.delta_s}")
        if not self.delta_mini <= self.delta_max:
            raise ValueError(f"delta_mini {self.delta_mini} exceeds delta_max {self.delta_max}")
        if not self.delta_mini <= self.delta0 <= self.delta_max:
            raise ValueError(f"delta0 {self.delta0} outside [delta_mini, delta_max] = [{self.delta_mini}, {self.delta_max}]")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class MonitorState:
    lbar_ema: float
    beta_s: float
    delta_s: float
    thresholds: tuple[float, ...]
    beta_t: float
    epsilon: float
    delta0: float
    delta_max: float
    delta_mini: float
    initialized: bool = False
    ema_on_pause: bool = True
    # last observation, kept for trace rows
    last_lbar: float = math.nan
    last_ratio: float = math.nan


def init_state(cfg: MonitorConfig = MonitorConfig()) -> MonitorState:
    cfg.validate()
    return MonitorState(
        lbar_ema=math.nan,
        beta_s=cfg.beta_s,
        delta_s=cfg.delta_s,
        thresholds=(cfg.delta0,) * cfg.num_classes,
        beta_t=cfg.beta_t,
        epsilon=cfg.epsilon,
        delta0=cfg.delta0,
        delta_max=cfg.delta_max,
        delta_mini=cfg.delta_mini,
        ema_on_pause=cfg.ema_on_pause,
    )


def skip_decision(state: MonitorState, detections: Sequence[Detection]) -> tuple[Decision, MonitorState]:
    """Ratio test against the running mean score, then the EMA update.

    Frames without detections pause and leave the state untouched.
    """
    if not detections:
        return Decision.PAUSE, state
    lbar = float(np.mean([d.score for d in detections]))
    if not state.initialized:
        return Decision.ADAPT, replace(state, lbar_ema=lbar, initialized=True, last_lbar=lbar, last_ratio=1.0)
    ratio = lbar / state.lbar_ema
    decision = Decision.ADAPT if 1.0 / state.delta_s < ratio < state.delta_s else Decision.PAUSE
    ema = state.lbar_ema
    if decision is Decision.ADAPT or state.ema_on_pause:
        ema = state.beta_s * state.lbar_ema + (1.0 - state.beta_s) * lbar
    return decision, replace(state, lbar_ema=ema, last_lbar=lbar, last_ratio=ratio)


def update_thresholds(state: MonitorState, detections: Sequence[Detection]) -> MonitorState:
    thr = list(state.thresholds)
    per_class: dict[int, list[float]] = {}
    for d in detections:
        per_class.setdefault(d.class_id, []).append(d.score)
    for c, scores in per_class.items():
        target = state.epsilon * math.sqrt(float(np.mean(scores)))
        new = state.beta_t * thr[c] + (1.0 - state.beta_t) * target
        thr[c] = min(max(new, state.delta_mini), state.delta_max)
    return replace(state, thresholds=tuple(thr))
