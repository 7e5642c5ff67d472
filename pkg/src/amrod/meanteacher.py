"""Mean-teacher scaffolding: weak/strong views, pseudo-labels, losses, updates.

The teacher sees a weakly augmented frame; the student trains on a strongly
augmented view of the same frame. Augmentations are photometric only, so
teacher boxes stay valid on the student view.

Student step is plain descent, ``theta <- theta - gamma * grad``; the teacher
follows ``theta_T <- alpha * theta_T + (1 - alpha) * theta_S``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import ocl
from .toydet import Detection, Image, LossTerms, ParamStore, backbone, bind, loss_terms


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.01
    alpha: float = 0.999
    lambda_cl: float = 0.5
    mu_kl: float = 1.0
    tau: float = ocl.DEFAULT_TAU

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.lambda_cl < 0 or self.mu_kl < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class AugmentConfig:
    weak_sigma: float = 0.01
    strong_sigma: float = 0.05
    contrast_low: float = 0.7
    contrast_high: float = 1.3
    cutout: int = 8


@dataclass
class AugmentedPair:
    weak: Image
    strong: Image
    shared_geometry: bool = True


def augment(image: Image, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentedPair:
    """Photometric weak/strong views. Consumes the same number of draws for any config."""
    x = image.pixels
    n_weak = rng.normal(0.0, 1.0, size=x.shape)
    n_strong = rng.normal(0.0, 1.0, size=x.shape)
    scale = rng.uniform(cfg.contrast_low, cfg.contrast_high)
    size = x.shape[-1]
    k = min(cfg.cutout, size)
    cy, cx = (int(v) for v in rng.integers(0, size - k + 1, size=2))

    weak = np.clip(x + cfg.weak_sigma * n_weak, 0.0, 1.0)
    if cfg.strong_sigma == 0 and cfg.contrast_low == cfg.contrast_high == 1.0 and cfg.cutout == 0:
        strong = np.clip(x.copy(), 0.0, 1.0)
    else:
        m = x.mean()
        strong = (x - m) * scale + m + cfg.strong_sigma * n_strong
        if k > 0:
            # flat patch at the frame mean: erases content without drawing a dark square
            strong[:, cy : cy + k, cx : cx + k] = m
        strong = np.clip(strong, 0.0, 1.0)
    return AugmentedPair(Image(weak, image.domain_tag), Image(strong, image.domain_tag))


def pseudo_label(teacher_dets: Sequence[Detection], thresholds: Sequence[float]) -> list[Detection]:
    return [d for d in teacher_dets if d.score >= thresholds[d.class_id]]


def kl_loss(student_logits: ad.Tensor, teacher_logits: np.ndarray) -> ad.Tensor:
    """Mean over proposals of KL(P_teacher || Q_student) on class softmaxes."""
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, ad.Tensor) else teacher_logits)
    if t.shape != student_logits.shape:
        raise ad.ShapeError("kl_loss", student_logits.shape, t.shape)
    z = t - t.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    logq = ad.log_softmax(student_logits)
    # sum_x P (log P - log Q), averaged over rows
    per_row = ad.sub(float((p * logp).sum()), ad.sum(ad.mul(logq, p)))
    return ad.mul(per_row, 1.0 / t.shape[0])


@dataclass
class StudentLosses:
    graph: ad.Graph
    total: ad.Tensor
    pl: ad.Tensor
    cl: ad.Tensor
    kl: ad.Tensor


class StudentPass:
    """One graph over the student's parameters on the strong view.

    The loss pieces can be built one at a time so the caller controls their
    order; :func:`overall_loss` assembles them in the standard order.
    """

    def __init__(self, student: ParamStore, strong: Image):
        self.graph = ad.Graph()
        self.w = bind(student, self.graph, trainable=True)
        self.image = strong
        self.features = backbone(strong, self.w)
        self.zero = self.graph.constant(0.0)

    def contrastive(self, teacher_features: np.ndarray, proposals: np.ndarray, tau: float) -> ad.Tensor:
        if len(proposals) == 0:
            return self.zero
        return ocl.contrastive_loss(ocl.extract_pairs(teacher_features, self.features, proposals), tau)

    def supervised(self, pseudo: Sequence[Detection], proposals: np.ndarray) -> LossTerms:
        return loss_terms(self.image, pseudo, self.w, proposals=proposals, features=self.features)

    def kl(self, terms: LossTerms, teacher_logits: np.ndarray, n_proposals: int) -> ad.Tensor:
        if n_proposals == 0:
            return self.zero
        return kl_loss(ad.rows(terms.cls_logits, np.arange(n_proposals)), teacher_logits)

    def combine(self, pl: ad.Tensor, cl: ad.Tensor | None, kl: ad.Tensor | None, cfg: TrainerConfig) -> StudentLosses:
        total = pl
        cl = self.zero if cl is None else cl
        kl = self.zero if kl is None else kl
        if cl is not self.zero:
            total = ad.add(total, ad.mul(cl, cfg.lambda_cl))
        if kl is not self.zero:
            total = ad.add(total, ad.mul(kl, cfg.mu_kl))
        return StudentLosses(self.graph, total, pl, cl, kl)


def overall_loss(
    pair: AugmentedPair,
    pseudo: Sequence[Detection],
    proposals: np.ndarray,
    cfg: TrainerConfig,
    student: ParamStore,
    teacher_features: np.ndarray,
    teacher_logits: np.ndarray,
    use_ocl: bool = True,
    use_kl: bool = True,
) -> StudentLosses:
    """L_pl + lambda * L_cl + mu * L_kl on a fresh graph over the student's parameters.

    ``teacher_features`` ([D, cells]) and ``teacher_logits`` ([l, K+1]) come
    from the teacher's weak-view forward pass at ``proposals`` and are constants.
    Empty proposals make the contrastive and KL terms exactly zero.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    sp = StudentPass(student, pair.strong)
    cl = sp.contrastive(teacher_features, proposals, cfg.tau) if use_ocl and cfg.lambda_cl > 0 else None
    terms = sp.supervised(pseudo, proposals)
    kl = sp.kl(terms, teacher_logits, len(proposals)) if use_kl and cfg.mu_kl > 0 else None
    return sp.combine(terms.total, cl, kl, cfg)


def sgd_step(grads: dict[str, np.ndarray], cfg: TrainerConfig, student: ParamStore) -> ParamStore:
    missing = [k for k in student.names() if k not in grads]
    if missing:
        raise KeyError(f"no gradient for layers {missing}")
    return ParamStore({k: v - cfg.gamma * grads[k] for k, v in student.items()}, student.role)


def ema_update(teacher: ParamStore, student: ParamStore, alpha: float) -> ParamStore:
    teacher.check_schema(student)
    return ParamStore({k: alpha * v + (1.0 - alpha) * student[k] for k, v in teacher.items()}, teacher.role)
