"""A two-stage toy detector over single-channel square images.

Layout mirrors Faster R-CNN at miniature scale: a strided conv backbone
(stride 4), a proposal head with one square anchor per feature cell, and an
RoI head that classifies and refines average-pooled proposal features. The
supervised loss decomposes into an RPN term and an RCNN term.

Boxes are carried as ``(x0, y0, x1, y1)`` arrays in image-normalised
coordinates internally; :class:`Box` is the public centre/size form.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

NUM_CLASSES = 4
BACKGROUND = NUM_CLASSES
IMAGE_SIZE = 32
STRIDE = 4
DEFAULT_TOP_L = 12
SMOOTH_L1_BETA = 1.0
NMS_IOU = 0.5
MATCH_IOU = 0.5
ANCHOR_SIZE = 9.5 / IMAGE_SIZE
ROI_BOX_WEIGHTS = np.array([10.0, 10.0, 5.0, 5.0])
RPN_BOX_WEIGHTS = np.array([1.0, 1.0, 1.0, 1.0])
_MAX_LOG_SCALE = 4.0


# ------------------------------------------------------------------ types


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for k in ("cx", "cy", "w", "h"):
            object.__setattr__(self, k, float(getattr(self, k)))
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> np.ndarray:
        return np.array(
            [self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2]
        )


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class_id must be in [0, {NUM_CLASSES}), got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be a probability, got {self.score}")


@dataclass
class Image:
    pixels: np.ndarray  # [1, H, W] in [0, 1]
    domain_tag: str = "none"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or px.shape[0] != 1 or px.shape[1] != px.shape[2] or px.shape[1] % STRIDE:
            raise ValueError(f"image must be [1, H, H] with H divisible by {STRIDE}, got {px.shape}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def size(self) -> int:
        return self.pixels.shape[1]


class ParamStore:
    """Ordered layer-name -> array map with a role tag (student / teacher / source).

    Stores are treated as values: every transform builds a new store. A
    ``source`` store is read-only.
    """

    ROLES = ("student", "teacher", "source")

    def __init__(self, layers: dict[str, np.ndarray], role: str = "student"):
        if role not in self.ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.layers = {k: np.array(v, dtype=np.float64) for k, v in layers.items()}
        if role == "source":
            for v in self.layers.values():
                v.flags.writeable = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def items(self):
        return self.layers.items()

    def names(self) -> list[str]:
        return list(self.layers)

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.layers.values()))

    def schema(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.layers.items()]

    def check_schema(self, other: "ParamStore | dict") -> None:
        theirs = other.schema() if isinstance(other, ParamStore) else [(k, np.shape(v)) for k, v in other.items()]
        if self.schema() != theirs:
            raise ValueError("parameter schema mismatch")

    def replace(self, layers: dict[str, np.ndarray], role: str | None = None) -> "ParamStore":
        self.check_schema(layers)
        return ParamStore(layers, role or ("student" if self.role == "source" else self.role))

    def copy(self, role: str | None = None) -> "ParamStore":
        return ParamStore(self.layers, role or self.role)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.layers.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamStore):
            return NotImplemented
        return self.schema() == other.schema() and all(
            np.array_equal(v, other.layers[k]) for k, v in self.layers.items()
        )

    def __repr__(self) -> str:
        return f"ParamStore(role={self.role!r}, layers={len(self)}, params={self.num_params})"


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = IMAGE_SIZE
    conv1_channels: int = 16
    feature_dim: int = 16
    hidden: int = 64
    top_l: int = DEFAULT_TOP_L

    @property
    def grid(self) -> int:
        return self.image_size // STRIDE


def init_params(cfg: DetectorConfig = DetectorConfig(), seed: int = 0) -> ParamStore:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    c1, d, hdn = cfg.conv1_channels, cfg.feature_dim, cfg.hidden

    def he(out_dim, fan_in, shape=None):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape or (out_dim, fan_in))

    layers = {
        "backbone.conv1.w": he(c1, 9),
        "backbone.conv1.b": np.zeros(c1),
        "backbone.conv2.w": he(d, 9 * c1),
        "backbone.conv2.b": np.zeros(d),
        "rpn.conv.w": he(d, 9 * d),
        "rpn.conv.b": np.zeros(d),
        "rpn.out.w": rng.normal(0.0, 0.01, size=(5, d)),
        "rpn.out.b": np.zeros(5),
        "roi.fc.w": he(None, d, (d, hdn)),
        "roi.fc.b": np.zeros(hdn),
        "roi.cls.w": rng.normal(0.0, 0.01, size=(hdn, NUM_CLASSES + 1)),
        "roi.cls.b": np.zeros(NUM_CLASSES + 1),
        "roi.box.w": rng.normal(0.0, 0.001, size=(hdn, 4)),
        "roi.box.b": np.zeros(4),
    }
    return ParamStore(layers, "student")


def config_for(store: ParamStore) -> DetectorConfig:
    """Recover architecture widths from a store's layer shapes."""
    c1 = store["backbone.conv1.w"].shape[0]
    d = store["backbone.conv2.w"].shape[0]
    hdn = store["roi.fc.w"].shape[1]
    return DetectorConfig(conv1_channels=c1, feature_dim=d, hidden=hdn)


def bind(store: ParamStore, graph: ad.Graph, trainable: bool = False) -> dict[str, ad.Tensor]:
    """Place a store's layers on ``graph``; trainable layers get gradients by name."""
    if trainable:
        return {k: graph.param(k, v) for k, v in store.items()}
    return {k: graph.constant(v) for k, v in store.items()}


# ------------------------------------------------------------- geometry


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes [n,4] x [m,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode(boxes: np.ndarray, refs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Regression targets of ``boxes`` relative to ``refs`` (both corner form)."""
    rw, rh = refs[:, 2] - refs[:, 0], refs[:, 3] - refs[:, 1]
    rx, ry = refs[:, 0] + rw / 2, refs[:, 1] + rh / 2
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + bw / 2, boxes[:, 1] + bh / 2
    t = np.stack([(bx - rx) / rw, (by - ry) / rh, np.log(bw / rw), np.log(bh / rh)], axis=1)
    return t * weights


def decode(deltas: np.ndarray, refs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    d = deltas / weights
    rw, rh = refs[:, 2] - refs[:, 0], refs[:, 3] - refs[:, 1]
    rx, ry = refs[:, 0] + rw / 2, refs[:, 1] + rh / 2
    cx, cy = rx + d[:, 0] * rw, ry + d[:, 1] * rh
    w = rw * np.exp(np.clip(d[:, 2], -_MAX_LOG_SCALE, _MAX_LOG_SCALE))
    h = rh * np.exp(np.clip(d[:, 3], -_MAX_LOG_SCALE, _MAX_LOG_SCALE))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes: np.ndarray, min_size: float) -> np.ndarray:
    """Clip corner boxes to the unit square keeping at least ``min_size`` extent."""
    b = np.clip(boxes, 0.0, 1.0)
    for lo, hi in ((0, 2), (1, 3)):
        w = b[:, hi] - b[:, lo]
        small = w < min_size
        if small.any():
            c = np.clip((b[small, lo] + b[small, hi]) / 2, min_size / 2, 1 - min_size / 2)
            b[small, lo] = c - min_size / 2
            b[small, hi] = c + min_size / 2
    return b


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = [b.corners() for b in boxes]
    return np.array(arr, dtype=np.float64).reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box.from_corners(*map(float, r)) for r in arr]


@lru_cache(maxsize=8)
def cell_centers(grid: int) -> np.ndarray:
    """[grid*grid, 2] normalised (x, y) centres, row-major scan order."""
    c = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@lru_cache(maxsize=8)
def anchors(grid: int, image_size: int) -> np.ndarray:
    s = ANCHOR_SIZE * IMAGE_SIZE / image_size
    cc = cell_centers(grid)
    return np.concatenate([cc - s / 2, cc + s / 2], axis=1)


# ------------------------------------------------------------- network


@lru_cache(maxsize=16)
def _im2col_index(channels: int, size: int, stride: int) -> np.ndarray:
    """Gather index for a 3x3, pad-1 convolution over a [C, size, size] flat input."""
    out = (size + 2 - 3) // stride + 1
    oy, ox = np.meshgrid(np.arange(out) * stride, np.arange(out) * stride, indexing="ij")
    idx = np.empty((channels, 3, 3, out * out), dtype=np.intp)
    for ky in range(3):
        for kx in range(3):
            y = (oy + ky - 1).ravel()
            x = (ox + kx - 1).ravel()
            ok = (y >= 0) & (y < size) & (x >= 0) & (x < size)
            for c in range(channels):
                idx[c, ky, kx] = np.where(ok, c * size * size + y * size + x, -1)
    idx = idx.reshape(channels * 9, out * out)
    idx.flags.writeable = False
    return idx


def _conv3x3(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor, channels: int, size: int, stride: int) -> ad.Tensor:
    cols = ad.take(x, _im2col_index(channels, size, stride))
    return ad.relu(ad.add(w @ cols, ad.reshape(b, (-1, 1))))


def backbone(image: Image, w: dict[str, ad.Tensor]) -> ad.Tensor:
    """Two stride-2 3x3 conv + relu layers. Returns the feature map as [D, (H/4)*(W/4)]."""
    graph = w["backbone.conv1.w"].graph
    size = image.size
    x = graph.constant(image.pixels)
    c1 = w["backbone.conv1.w"].shape[0]
    h = _conv3x3(x, w["backbone.conv1.w"], w["backbone.conv1.b"], 1, size, 2)
    return _conv3x3(h, w["backbone.conv2.w"], w["backbone.conv2.b"], c1, size // 2, 2)


def rpn_forward(features: ad.Tensor, w: dict[str, ad.Tensor]) -> tuple[ad.Tensor, ad.Tensor]:
    """Objectness logits [cells] and anchor deltas [cells, 4]."""
    d, cells = features.shape
    grid = int(round(np.sqrt(cells)))
    h = _conv3x3(features, w["rpn.conv.w"], w["rpn.conv.b"], d, grid, 1)
    out = ad.add(w["rpn.out.w"] @ h, ad.reshape(w["rpn.out.b"], (-1, 1)))  # [5, cells]
    out_t = ad.transpose(out)
    logits = ad.reshape(ad.rows(out, 0), (cells,))
    deltas = ad.take(out_t, _delta_index(cells))
    return logits, deltas


@lru_cache(maxsize=8)
def _delta_index(cells: int) -> np.ndarray:
    idx = np.arange(cells)[:, None] * 5 + np.arange(1, 5)[None, :]
    idx.flags.writeable = False
    return idx


def _proposal_arrays(logits: np.ndarray, deltas: np.ndarray, image_size: int, top_l: int):
    cells = logits.size
    grid = int(round(np.sqrt(cells)))
    obj = np.exp(-np.logaddexp(0.0, -logits))
    order = np.argsort(-obj, kind="stable")[: min(top_l, cells)]
    boxes = decode(deltas[order], anchors(grid, image_size)[order], RPN_BOX_WEIGHTS)
    boxes = clip_boxes(boxes, 1.0 / image_size)
    return boxes, obj[order], order


def proposal_head(features: ad.Tensor, w: dict[str, ad.Tensor], top_l: int = DEFAULT_TOP_L, image_size: int = IMAGE_SIZE) -> list[Proposal]:
    """Top-``top_l`` anchors by objectness (ties broken in row/col scan order)."""
    if top_l < 1:
        raise ValueError("top_l must be >= 1")
    logits, deltas = rpn_forward(features, w)
    boxes, obj, _ = _proposal_arrays(logits.data, deltas.data, image_size, top_l)
    return [Proposal(b, float(o)) for b, o in zip(array_to_boxes(boxes), obj)]


def pool_matrix(boxes: np.ndarray, grid: int) -> np.ndarray:
    """[n, cells] averaging weights over cells whose centres fall inside each box.

    An empty cover falls back to the cell nearest the box centre.
    """
    cc = cell_centers(grid)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    inside = (
        (cc[None, :, 0] >= boxes[:, None, 0])
        & (cc[None, :, 0] <= boxes[:, None, 2])
        & (cc[None, :, 1] >= boxes[:, None, 1])
        & (cc[None, :, 1] <= boxes[:, None, 3])
    ).astype(np.float64)
    empty = inside.sum(axis=1) == 0
    if empty.any():
        ctr = (boxes[empty, :2] + boxes[empty, 2:]) / 2
        d2 = ((cc[None, :, :] - ctr[:, None, :]) ** 2).sum(axis=2)
        rows_ = np.flatnonzero(empty)
        inside[rows_, np.argmin(d2, axis=1)] = 1.0
    return inside / inside.sum(axis=1, keepdims=True)


def roi_pool_many(features: ad.Tensor, boxes: np.ndarray) -> ad.Tensor:
    d, cells = features.shape
    grid = int(round(np.sqrt(cells)))
    return ad.matmul(pool_matrix(boxes, grid), ad.transpose(features))


def roi_pool(features: ad.Tensor, box: Box) -> ad.Tensor:
    """Centre-in-box average pooling to a [D] vector."""
    pooled = roi_pool_many(features, box.corners()[None])
    return ad.reshape(pooled, (features.shape[0],))


def roi_head(pooled: ad.Tensor, w: dict[str, ad.Tensor]) -> tuple[ad.Tensor, ad.Tensor]:
    """Class logits [.., K+1] (last = background) and box refinement [.., 4]."""
    squeeze = pooled.data.ndim == 1
    x = ad.reshape(pooled, (1, -1)) if squeeze else pooled
    h = ad.relu(ad.add(x @ w["roi.fc.w"], w["roi.fc.b"]))
    cls = ad.add(h @ w["roi.cls.w"], w["roi.cls.b"])
    box = ad.add(h @ w["roi.box.w"], w["roi.box.b"])
    if squeeze:
        cls = ad.reshape(cls, (NUM_CLASSES + 1,))
        box = ad.reshape(box, (4,))
    return cls, box


# ------------------------------------------------------------- inference


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = NMS_IOU) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order (stable ties)."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep = []
    if not order:
        return keep
    iou = box_iou_matrix(boxes, boxes)
    while order:
        i = order.pop(0)
        keep.append(int(i))
        order = [j for j in order if iou[i, j] < iou_thresh]
    return keep


@dataclass
class Prediction:
    """Everything one forward pass of a network yields for the adaptation loop."""

    detections: list[Detection]
    proposals: np.ndarray  # [l, 4] corner boxes
    objectness: np.ndarray  # [l]
    features: np.ndarray  # [D, cells]
    cls_logits: np.ndarray  # [l, K+1] at the proposals
    det_boxes: np.ndarray = field(repr=False, default=None)


def postprocess(proposals: np.ndarray, cls_logits: np.ndarray, box_deltas: np.ndarray, score_floor: float, image_size: int) -> tuple[list[Detection], np.ndarray]:
    z = cls_logits - cls_logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    cls = np.argmax(p[:, :NUM_CLASSES], axis=1)
    score = p[np.arange(len(cls)), cls]
    boxes = clip_boxes(decode(box_deltas, proposals, ROI_BOX_WEIGHTS), 1.0 / image_size)
    out: list[Detection] = []
    kept_boxes = []
    for c in range(NUM_CLASSES):
        sel = np.flatnonzero((cls == c) & (score >= score_floor))
        if sel.size == 0:
            continue
        for k in nms(boxes[sel], score[sel]):
            i = sel[k]
            out.append(Detection(Box.from_corners(*map(float, boxes[i])), c, float(score[i])))
            kept_boxes.append(boxes[i])
    order = sorted(range(len(out)), key=lambda i: (-out[i].score, out[i].class_id))
    out = [out[i] for i in order]
    kept = np.array(kept_boxes).reshape(-1, 4)[order] if kept_boxes else np.zeros((0, 4))
    return out, kept


def predict(image: Image, store: ParamStore, score_floor: float = 0.05, top_l: int = DEFAULT_TOP_L) -> Prediction:
    """Single no-grad forward pass: detections plus the intermediates OCL and KL reuse."""
    g = ad.Graph()
    w = bind(store, g)
    feats = backbone(image, w)
    logits, deltas = rpn_forward(feats, w)
    props, obj, _ = _proposal_arrays(logits.data, deltas.data, image.size, top_l)
    cls, box = roi_head(roi_pool_many(feats, props), w)
    dets, det_boxes = postprocess(props, cls.data, box.data, score_floor, image.size)
    return Prediction(dets, props, obj, feats.data, cls.data, det_boxes)


def forward_at(image: Image, store: ParamStore, proposals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """No-grad feature map and RoI class logits at externally chosen proposals."""
    g = ad.Graph()
    w = bind(store, g)
    feats = backbone(image, w)
    cls, _ = roi_head(roi_pool_many(feats, proposals), w)
    return feats.data, cls.data


def detect(image: Image, store: ParamStore, score_floor: float = 0.05, top_l: int = DEFAULT_TOP_L) -> list[Detection]:
    """backbone -> proposals -> RoI pooling -> RoI head -> per-class NMS."""
    if not 0.0 <= score_floor < 1.0:
        raise ValueError("score_floor must lie in [0, 1)")
    return predict(image, store, score_floor, top_l).detections


# ----------------------------------------------------------------- losses


def labels_to_arrays(labels: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray]:
    return boxes_to_array(d.box for d in labels), np.array([d.class_id for d in labels], dtype=np.intp)


def rpn_targets(label_boxes: np.ndarray, grid: int, image_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor labels (centre inside a label box), positive mask, and regression targets."""
    cc = cell_centers(grid)
    anc = anchors(grid, image_size)
    cells = cc.shape[0]
    if label_boxes.shape[0] == 0:
        return np.zeros(cells), np.zeros(cells, dtype=bool), np.zeros((cells, 4))
    inside = (
        (cc[:, None, 0] >= label_boxes[None, :, 0])
        & (cc[:, None, 0] <= label_boxes[None, :, 2])
        & (cc[:, None, 1] >= label_boxes[None, :, 1])
        & (cc[:, None, 1] <= label_boxes[None, :, 3])
    )
    pos = inside.any(axis=1)
    iou = np.where(inside, box_iou_matrix(anc, label_boxes), -1.0)
    which = np.argmax(iou, axis=1)
    targets = np.zeros((cells, 4))
    if pos.any():
        targets[pos] = encode(label_boxes[which[pos]], anc[pos], RPN_BOX_WEIGHTS)
    return pos.astype(np.float64), pos, targets


def rcnn_targets(proposals: np.ndarray, label_boxes: np.ndarray, label_classes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-proposal class (background unless IoU >= 0.5), matched mask, refinement targets."""
    n = proposals.shape[0]
    cls = np.full(n, BACKGROUND, dtype=np.intp)
    matched = np.zeros(n, dtype=bool)
    targets = np.zeros((n, 4))
    if label_boxes.shape[0] and n:
        iou = box_iou_matrix(proposals, label_boxes)
        best = np.argmax(iou, axis=1)
        matched = iou[np.arange(n), best] >= MATCH_IOU
        cls[matched] = label_classes[best[matched]]
        if matched.any():
            targets[matched] = encode(label_boxes[best[matched]], proposals[matched], ROI_BOX_WEIGHTS)
    return cls, matched, targets


def _smooth_l1_mean(pred: ad.Tensor, target: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    """Sum over the 4 coordinates, mean over masked rows; exactly 0 with an empty mask."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return ad.mul(ad.sum(pred), 0.0)
    diff = ad.sub(ad.rows(pred, idx), target[idx])
    return ad.mul(ad.sum(ad.smooth_l1(diff, SMOOTH_L1_BETA)), 1.0 / idx.size)


@dataclass
class LossTerms:
    rpn_cls: ad.Tensor
    rpn_box: ad.Tensor
    rcnn_cls: ad.Tensor
    rcnn_box: ad.Tensor
    cls_logits: ad.Tensor  # [n, K+1] student logits at the RoIs used
    features: ad.Tensor
    rois: np.ndarray

    @property
    def rpn(self) -> ad.Tensor:
        return ad.add(self.rpn_cls, self.rpn_box)

    @property
    def rcnn(self) -> ad.Tensor:
        return ad.add(self.rcnn_cls, self.rcnn_box)

    @property
    def total(self) -> ad.Tensor:
        return ad.add(self.rpn, self.rcnn)


def loss_terms(
    image: Image,
    labels: Sequence[Detection],
    w: dict[str, ad.Tensor],
    proposals: np.ndarray | None = None,
    top_l: int = DEFAULT_TOP_L,
    features: ad.Tensor | None = None,
) -> LossTerms:
    """Build the RPN and RCNN loss terms on the graph that holds ``w``.

    RoIs are ``proposals`` when given (teacher proposals during adaptation),
    otherwise the network's own detached top-``top_l`` proposals; the label
    boxes are always appended so every label has a matched RoI.
    """
    size = image.size
    feats = features if features is not None else backbone(image, w)
    grid = size // STRIDE
    logits, deltas = rpn_forward(feats, w)
    lb, lc = labels_to_arrays(labels)

    obj_t, pos, box_t = rpn_targets(lb, grid, size)
    # BCE with logits: softplus(z) - y z
    rpn_cls = ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, obj_t)))
    rpn_box = _smooth_l1_mean(deltas, box_t, pos)

    if proposals is None:
        proposals, _, _ = _proposal_arrays(logits.data, deltas.data, size, top_l)
    rois = np.concatenate([np.asarray(proposals).reshape(-1, 4), lb], axis=0)
    cls_logits, box_pred = roi_head(roi_pool_many(feats, rois), w)
    cls_t, matched, ref_t = rcnn_targets(rois, lb, lc)
    logp = ad.log_softmax(cls_logits)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(cls_t)), cls_t] = 1.0
    rcnn_cls = ad.neg(ad.mul(ad.sum(ad.mul(logp, onehot)), 1.0 / len(cls_t)))
    rcnn_box = _smooth_l1_mean(box_pred, ref_t, matched)
    return LossTerms(rpn_cls, rpn_box, rcnn_cls, rcnn_box, cls_logits, feats, rois)


def supervised_loss(
    image: Image,
    labels: Sequence[Detection],
    w: dict[str, ad.Tensor],
    proposals: np.ndarray | None = None,
    top_l: int = DEFAULT_TOP_L,
) -> ad.Tensor:
    """L_rpn + L_rcnn as a scalar node on the graph holding ``w``."""
    return loss_terms(image, labels, w, proposals, top_l).total
