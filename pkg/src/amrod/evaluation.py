"""Detection metrics and run summaries.

AP uses all-point (continuous) precision-recall interpolation, Pascal VOC
2010 style, at IoU 0.5. Matching is per frame and greedy in score order:
each detection takes the unmatched same-class ground truth with the highest
IoU >= 0.5, otherwise it is a false positive.

A run is summarised per (round, domain) cell; the overall mean is the plain
average of cell mAPs and ``iterations`` counts adapted frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .toydet import NUM_CLASSES, Box, Detection, box_iou_matrix

IOU_THRESH = 0.5


def iou(a: Box, b: Box) -> float:
    return float(box_iou_matrix(a.corners()[None], b.corners()[None])[0, 0])


def match_frame(dets: Sequence[Detection], gts: Sequence[Detection], iou_thresh: float = IOU_THRESH) -> list[tuple[int, float, bool]]:
    """Greedy per-frame matching. Returns (class_id, score, is_tp) per detection."""
    out = []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gt_boxes = np.array([g.box.corners() for g in gts]).reshape(-1, 4)
    gt_cls = np.array([g.class_id for g in gts], dtype=int)
    taken = np.zeros(len(gts), dtype=bool)
    if len(dets) and len(gts):
        ious = box_iou_matrix(np.array([d.box.corners() for d in dets]), gt_boxes)
    for i in order:
        d = dets[i]
        tp = False
        if len(gts):
            cand = np.where((gt_cls == d.class_id) & ~taken & (ious[i] >= iou_thresh), ious[i], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                taken[j] = True
                tp = True
        out.append((d.class_id, d.score, tp))
    return out


def ap_from_matches(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float | None:
    """All-point interpolated AP. ``None`` when there is nothing to evaluate."""
    if n_gt == 0:
        return None if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: Sequence[Detection], gts: Sequence[Detection], iou_thresh: float = IOU_THRESH) -> float | None:
    """AP of one class on one image's worth of detections and ground truths."""
    m = match_frame(dets, gts, iou_thresh)
    return ap_from_matches([s for _, s, _ in m], [t for _, _, t in m], len(gts))


# ----------------------------------------------------------------- records


@dataclass
class MetricRecord:
    frame_index: int
    domain_tag: str
    domain_index: int
    round_index: int
    decision: str  # "adapt" | "pause"
    matches: list[tuple[int, float, bool]]
    gt_counts: list[int]  # per class

    @property
    def tp(self) -> list[int]:
        return [sum(1 for c, _, t in self.matches if c == k and t) for k in range(NUM_CLASSES)]

    @property
    def fp(self) -> list[int]:
        return [sum(1 for c, _, t in self.matches if c == k and not t) for k in range(NUM_CLASSES)]

    @property
    def fn(self) -> list[int]:
        return [g - t for g, t in zip(self.gt_counts, self.tp)]


def make_record(frame_index: int, domain_tag: str, domain_index: int, round_index: int, decision: str, dets: Sequence[Detection], gts: Sequence[Detection]) -> MetricRecord:
    counts = [0] * NUM_CLASSES
    for g in gts:
        counts[g.class_id] += 1
    return MetricRecord(frame_index, domain_tag, domain_index, round_index, decision, match_frame(dets, gts), counts)


def mean_ap(records: Iterable[MetricRecord]) -> float:
    """Mean over classes of AP pooled across the given frames."""
    scores = [[] for _ in range(NUM_CLASSES)]
    flags = [[] for _ in range(NUM_CLASSES)]
    n_gt = [0] * NUM_CLASSES
    for r in records:
        for c, s, t in r.matches:
            scores[c].append(s)
            flags[c].append(t)
        for c, n in enumerate(r.gt_counts):
            n_gt[c] += n
    aps = [ap_from_matches(scores[c], flags[c], n_gt[c]) for c in range(NUM_CLASSES)]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else float("nan")


# ----------------------------------------------------------------- summary


@dataclass
class Cell:
    round_index: int
    domain_index: int
    domain_tag: str
    map50: float
    frames: int
    adapted: int


@dataclass
class RunSummary:
    cells: list[Cell]
    mean_map: float
    iterations: int
    total_frames: int
    skip_rate: float
    round_means: list[float]
    name: str = ""
    gain: float | None = None
    cell_gains: list[float] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def paused(self) -> int:
        return self.total_frames - self.iterations

    def grid(self) -> np.ndarray:
        """[rounds, domains] array of cell mAPs."""
        rounds = max(c.round_index for c in self.cells) + 1
        doms = max(c.domain_index for c in self.cells) + 1
        g = np.full((rounds, doms), np.nan)
        for c in self.cells:
            g[c.round_index, c.domain_index] = c.map50
        return g

    def domain_tags(self) -> list[str]:
        seen = {}
        for c in self.cells:
            seen.setdefault(c.domain_index, c.domain_tag)
        return [seen[k] for k in sorted(seen)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        d = dict(d)
        d["cells"] = [Cell(**c) for c in d["cells"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)


def summarize(records: Sequence[MetricRecord], name: str = "") -> RunSummary:
    """Pure fold over per-frame records."""
    groups: dict[tuple[int, int], list[MetricRecord]] = {}
    for r in records:
        groups.setdefault((r.round_index, r.domain_index), []).append(r)
    cells = []
    for (rd, dm), rs in sorted(groups.items()):
        cells.append(Cell(rd, dm, rs[0].domain_tag, mean_ap(rs), len(rs), sum(r.decision == "adapt" for r in rs)))
    maps = [c.map50 for c in cells]
    rounds = sorted({c.round_index for c in cells})
    round_means = [float(np.mean([c.map50 for c in cells if c.round_index == r])) for r in rounds]
    iters = sum(c.adapted for c in cells)
    total = len(records)
    return RunSummary(
        cells=cells,
        mean_map=float(np.mean(maps)) if maps else float("nan"),
        iterations=int(iters),
        total_frames=total,
        skip_rate=(total - iters) / total if total else 0.0,
        round_means=round_means,
        name=name,
    )


def with_gain(candidate: RunSummary, baseline: RunSummary) -> RunSummary:
    """Copy of ``candidate`` with Gain fields filled against ``baseline``."""
    a = [(c.round_index, c.domain_index, c.frames) for c in candidate.cells]
    b = [(c.round_index, c.domain_index, c.frames) for c in baseline.cells]
    if a != b or candidate.total_frames != baseline.total_frames:
        raise ValueError("cannot compute gain: runs cover different streams")
    out = RunSummary.from_dict(candidate.to_dict())
    out.cell_gains = [c.map50 - d.map50 for c, d in zip(candidate.cells, baseline.cells)]
    out.gain = candidate.mean_map - baseline.mean_map
    return out


def finite(x: float) -> bool:
    return x is not None and not math.isnan(x)
