"""Parameter restoration toward the frozen source weights.

Three variants share one masking pipeline:

* ARR: scores are the empirical diagonal Fisher information times a fresh
  Uniform(0, 1) draw; per layer the ``ceil(q * n)`` lowest-scoring elements
  are reset to the source value.
* DR (data-driven): the same per-layer selection on the raw Fisher values.
* SR (stochastic): every element is reset independently with probability
  ``p_reset``.

The per-layer reset count is fixed at ``ceil(q * n)`` (at least one element
per layer); ties at the cut-off go to the lowest flat index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .toydet import ParamStore

MODES = ("arr", "sr", "dr", "none")


@dataclass(frozen=True)
class RestoreConfig:
    mode: str = "arr"
    q: float = 0.01
    p_reset: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"restore mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")
        if not 0.0 <= self.p_reset <= 1.0:
            raise ValueError(f"p_reset must lie in [0, 1], got {self.p_reset}")


@dataclass
class FimAccumulator:
    layers: dict[str, np.ndarray]
    sample_count: int = 1

    def summary(self) -> tuple[float, float, float]:
        flat = np.concatenate([v.ravel() for v in self.layers.values()])
        return float(flat.min()), float(np.median(flat)), float(flat.max())


def fim_from_grads(grads: dict[str, np.ndarray]) -> FimAccumulator:
    """Squared log-likelihood gradients of a single sample."""
    return FimAccumulator({k: np.square(np.asarray(g, dtype=np.float64)) for k, g in grads.items()}, 1)


def reset_scores(fim: FimAccumulator, rng: np.random.Generator, unit_noise: bool = False) -> dict[str, np.ndarray]:
    """Fisher values times Uniform(0, 1); ``unit_noise`` replaces the draw with ones."""
    if unit_noise:
        return {k: v.copy() for k, v in fim.layers.items()}
    return {k: v * rng.random(v.shape) for k, v in fim.layers.items()}


def reset_count(n: int, q: float) -> int:
    return min(n, max(1, math.ceil(q * n - 1e-12)))


def build_mask(scores: dict[str, np.ndarray], q: float) -> dict[str, np.ndarray]:
    """Per layer, mark the ``ceil(q*n)`` smallest scores (stable order breaks ties)."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    out = {}
    for k, w in scores.items():
        flat = np.asarray(w).ravel()
        m = np.zeros(flat.size, dtype=bool)
        m[np.argsort(flat, kind="stable")[: reset_count(flat.size, q)]] = True
        out[k] = m.reshape(np.shape(w))
    return out


def apply_restore(student: ParamStore, source: ParamStore, mask: dict[str, np.ndarray]) -> ParamStore:
    student.check_schema(source)
    student.check_schema(mask)
    layers = {k: np.where(mask[k], source[k], v) for k, v in student.items()}
    return ParamStore(layers, student.role)


def adaptive_randomized_restore(
    student: ParamStore, source: ParamStore, fim: FimAccumulator, q: float, rng: np.random.Generator
) -> tuple[ParamStore, dict[str, np.ndarray]]:
    mask = build_mask(reset_scores(fim, rng), q)
    return apply_restore(student, source, mask), mask


def stochastic_restore(
    student: ParamStore, source: ParamStore, p_reset: float, rng: np.random.Generator
) -> tuple[ParamStore, dict[str, np.ndarray]]:
    if not 0.0 <= p_reset <= 1.0:
        raise ValueError(f"p_reset must lie in [0, 1], got {p_reset}")
    mask = {k: rng.random(v.shape) < p_reset for k, v in student.items()}
    return apply_restore(student, source, mask), mask


def data_driven_restore(
    student: ParamStore, source: ParamStore, fim: FimAccumulator, q: float
) -> tuple[ParamStore, dict[str, np.ndarray]]:
    mask = build_mask(fim.layers, q)
    return apply_restore(student, source, mask), mask
