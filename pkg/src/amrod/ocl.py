"""Object-level contrastive learning over RoI features.

For each teacher proposal the teacher feature (weak view) and the student
feature (strong view) form the positive pair; the other proposals' student
features are the negatives. Features are L2-normalised, so dot products are
cosine similarities. Only the student side carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .toydet import pool_matrix

DEFAULT_TAU = 0.07


@dataclass
class FeaturePairSet:
    teacher_feats: np.ndarray  # [l, D], unit rows, constant
    student_feats: ad.Tensor  # [l, D], unit rows
    proposal_ids: np.ndarray

    def __len__(self) -> int:
        return self.teacher_feats.shape[0]


def _normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)


def extract_pairs(weak_featmap, strong_featmap: ad.Tensor, proposals: np.ndarray) -> FeaturePairSet:
    """Pool both feature maps ([D, cells]) at the same proposal boxes ([l, 4] corners)."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if proposals.shape[0] == 0:
        raise ValueError("extract_pairs needs at least one proposal")
    weak = weak_featmap.data if isinstance(weak_featmap, ad.Tensor) else np.asarray(weak_featmap)
    if weak.shape != strong_featmap.shape:
        raise ad.ShapeError("extract_pairs", weak.shape, strong_featmap.shape)
    grid = int(round(np.sqrt(weak.shape[1])))
    P = pool_matrix(proposals, grid)
    teacher = _normalize_rows(P @ weak.T)
    student = ad.l2_normalize(ad.matmul(P, ad.transpose(strong_featmap)))
    return FeaturePairSet(teacher, student, np.arange(proposals.shape[0]))


def contrastive_loss(pairs: FeaturePairSet, tau: float = DEFAULT_TAU) -> ad.Tensor:
    """Mean over teacher anchors of -log softmax_j(f_i^T . f_j^S / tau) at j = i."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    l = len(pairs)
    sims = ad.matmul(pairs.teacher_feats / tau, ad.transpose(pairs.student_feats))  # [l, l]
    logp = ad.log_softmax(sims)
    eye = np.eye(l)
    return ad.neg(ad.mul(ad.sum(ad.mul(logp, eye)), 1.0 / l))
