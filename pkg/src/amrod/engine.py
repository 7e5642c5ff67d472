"""The online adaptation loop.

:class:`Engine` consumes images one at a time and never sees ground truth.
Each frame runs, in order:

    teacher_predict      weak view through the teacher (the frame's output)
    skip_check           ratio test on the mean score; may pause here
    threshold_update     per-class dynamic thresholds
    ocl_loss             object-level contrastive term
    pseudo_label         teacher detections above their class threshold
    supervised_kl_loss   L_pl and KL on the strong view
    student_sgd          descent step on L_all
    teacher_ema          teacher <- EMA of student
    restore              reset selected student weights to the source

A paused frame stops after ``skip_check``: one forward pass, no mutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import meanteacher as mt
from . import restore as rs
from .config import RunConfig
from .monitor import Decision, init_state, skip_decision, update_thresholds
from .toydet import NUM_CLASSES, Detection, Image, ParamStore, bind, forward_at, loss_terms, predict
from . import autodiff as ad

OPS = (
    "teacher_predict",
    "skip_check",
    "threshold_update",
    "ocl_loss",
    "pseudo_label",
    "supervised_kl_loss",
    "student_sgd",
    "teacher_ema",
    "restore",
)


@dataclass
class StepResult:
    detections: list[Detection]
    decision: Decision
    ops: list[str]
    info: dict = field(default_factory=dict)


class Engine:
    def __init__(self, source: ParamStore, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.source = source.copy("source")
        self.student = source.copy("student")
        self.teacher = source.copy("teacher")
        self.monitor = init_state(cfg.monitor)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.run.seed, 0xA3]))
        self.frames = 0
        self.adapted = 0
        self.forward_passes = 0

    @property
    def thresholds(self) -> tuple[float, ...]:
        v = self.cfg.variant
        if v.use_am_threshold:
            return self.monitor.thresholds
        return (v.fixed_threshold,) * NUM_CLASSES

    def _forward(self, image: Image, store: ParamStore):
        self.forward_passes += 1
        d = self.cfg.detector
        return predict(image, store, d.score_floor, d.top_l)

    def step(self, image: Image) -> StepResult:
        cfg, v = self.cfg, self.cfg.variant
        self.frames += 1
        ops: list[str] = []
        pair = mt.augment(image, self.rng, cfg.augment)
        predictor = self.teacher if v.supervision_source == "teacher" else self.student
        pred = self._forward(pair.weak, predictor)
        ops.append("teacher_predict")
        dets = pred.detections
        info = {"n_det": len(dets), "lbar": float(np.mean([d.score for d in dets])) if dets else math.nan}

        if not v.adapt:
            return StepResult(dets, Decision.PAUSE, ops, self._monitor_info(info))

        decision = Decision.ADAPT
        if v.use_am_skip:
            decision, self.monitor = skip_decision(self.monitor, dets)
            ops.append("skip_check")
        if decision is Decision.PAUSE:
            return StepResult(dets, decision, ops, self._monitor_info(info))

        if v.use_am_threshold:
            self.monitor = update_thresholds(self.monitor, dets)
            ops.append("threshold_update")
        thresholds = self.thresholds

        proposals = pred.proposals
        if v.supervision_source == "teacher":
            t_feats, t_logits = pred.features, pred.cls_logits
        else:
            t_feats, t_logits = forward_at(pair.weak, self.teacher, proposals)

        sp = mt.StudentPass(self.student, pair.strong)
        tc = cfg.trainer
        cl = None
        if v.use_ocl and tc.lambda_cl > 0:
            cl = sp.contrastive(t_feats, proposals, tc.tau)
            ops.append("ocl_loss")
        pseudo = mt.pseudo_label(dets, thresholds)
        ops.append("pseudo_label")
        terms = sp.supervised(pseudo, proposals)
        kl = sp.kl(terms, t_logits, len(proposals)) if v.use_kl and tc.mu_kl > 0 else None
        losses = sp.combine(terms.total, cl, kl, tc)
        ops.append("supervised_kl_loss")

        grads = losses.graph.backward(losses.total)
        student_hat = mt.sgd_step(grads, tc, self.student)
        ops.append("student_sgd")
        self.teacher = mt.ema_update(self.teacher, student_hat, tc.alpha)
        ops.append("teacher_ema")

        info.update(
            n_pseudo=len(pseudo),
            loss_total=losses.total.item(),
            loss_pl=losses.pl.item(),
            loss_cl=losses.cl.item(),
            loss_kl=losses.kl.item(),
        )
        self.student = self._restore(student_hat, pair.strong, pseudo, proposals, info)
        if cfg.restore.mode != "none":
            ops.append("restore")
        self.adapted += 1
        return StepResult(dets, decision, ops, self._monitor_info(info))

    def _restore(self, student_hat: ParamStore, strong: Image, pseudo, proposals, info: dict) -> ParamStore:
        rc = self.cfg.restore
        if rc.mode == "none":
            return student_hat
        if rc.mode == "sr":
            out, mask = rs.stochastic_restore(student_hat, self.source, rc.p_reset, self.rng)
        else:
            fim = self.fisher(student_hat, strong, pseudo, proposals)
            info.update(zip(("fim_min", "fim_median", "fim_max"), fim.summary()))
            if rc.mode == "arr":
                out, mask = rs.adaptive_randomized_restore(student_hat, self.source, fim, rc.q, self.rng)
            else:
                out, mask = rs.data_driven_restore(student_hat, self.source, fim, rc.q)
        info["reset_count"] = int(sum(int(m.sum()) for m in mask.values()))
        return ParamStore(out.layers, "student")

    def fisher(self, student_hat: ParamStore, strong: Image, pseudo, proposals) -> rs.FimAccumulator:
        """Squared gradients of the pseudo-label loss at the post-step student weights."""
        g = ad.Graph()
        w = bind(student_hat, g, trainable=True)
        loss = loss_terms(strong, pseudo, w, proposals=proposals).total
        return rs.fim_from_grads(g.backward(loss))

    def _monitor_info(self, info: dict) -> dict:
        m = self.monitor
        info.setdefault("lbar_ema", m.lbar_ema)
        info.setdefault("ratio", m.last_ratio if info.get("n_det") else math.nan)
        for c, t in enumerate(self.thresholds):
            info[f"thr_{c}"] = t
        return info
