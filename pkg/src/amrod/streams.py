"""Synthetic detection scenes, corruption domains, and continual schedules.

Scenes hold 1-4 shapes of four classes on a textured background whose level,
grain and stray specks vary per scene. An object is offset from the local
background, brighter or darker depending on its class:

    0 filled square (bright)   1 hollow square (dark)
    2 filled disc (bright)     3 cross (dark)

A target domain is a corruption family at a severity in 1..5. A stream runs
``rounds`` passes over an ordered domain list, ``frames_per_domain`` fresh
scenes per domain. Every frame is seeded from ``(seed, round, domain, frame)``
so any prefix of a stream can be regenerated independently.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .toydet import IMAGE_SIZE, NUM_CLASSES, Box, Detection, Image, box_iou_matrix

CORRUPTIONS = ("none", "gaussian_noise", "blur", "brightness", "contrast", "occlusion_snow")
TARGET_FAMILIES = CORRUPTIONS[1:]

# Objects differ from the local background by a signed offset; the sign is
# per class, the silhouette tells classes of equal sign apart.
CLASS_POLARITY = (1.0, -1.0, 1.0, -1.0)
OBJECT_CONTRAST_LOW, OBJECT_CONTRAST_HIGH = 0.25, 0.55
BACKGROUND_LOW, BACKGROUND_HIGH = 0.15, 0.85
TEXTURE = 0.08
GRAIN = 0.01
GRAIN_LOW, GRAIN_HIGH = 0.005, 0.07
MAX_SPECKS = 8
MIN_SIDE, MAX_SIDE = 7, 12
MAX_OBJECTS = 4
MAX_PAIR_IOU = 0.2
PLACEMENT_ATTEMPTS = 100

NOISE_SIGMA_PER_LEVEL = 0.02
BRIGHTNESS_PER_LEVEL = 0.12
CONTRAST_PER_LEVEL = 0.15
SNOW_DENSITY_PER_LEVEL = 0.02


@dataclass
class Scene:
    image: Image
    labels: list[Detection]


@dataclass(frozen=True)
class DomainSpec:
    corruption: str = "none"
    severity: int = 5

    def __post_init__(self):
        if self.corruption not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.corruption!r}; expected one of {CORRUPTIONS}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def tag(self) -> str:
        return "none" if self.corruption == "none" else f"{self.corruption}-{self.severity}"

    @classmethod
    def parse(cls, text: str) -> "DomainSpec":
        text = text.strip()
        if text == "none":
            return cls("none", 1)
        name, _, sev = text.rpartition("-")
        if not name:
            return cls(text, 5)
        return cls(name, int(sev))


@dataclass(frozen=True)
class StreamSpec:
    domain_sequence: tuple[DomainSpec, ...] = field(
        default_factory=lambda: tuple(DomainSpec(c, 5) for c in TARGET_FAMILIES)
    )
    frames_per_domain: int = 200
    rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "domain_sequence", tuple(self.domain_sequence))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.frames_per_domain < 1:
            raise ValueError("frames_per_domain must be >= 1")
        if not self.domain_sequence:
            raise ValueError("domain_sequence is empty")

    @property
    def total_frames(self) -> int:
        return self.rounds * len(self.domain_sequence) * self.frames_per_domain

    @property
    def is_long_term(self) -> bool:
        return self.rounds > 1


def short_term(seed: int = 0, frames_per_domain: int = 200, severity: int = 5) -> StreamSpec:
    return StreamSpec(tuple(DomainSpec(c, severity) for c in TARGET_FAMILIES), frames_per_domain, 1, seed)


def long_term(seed: int = 0, frames_per_domain: int = 100, rounds: int = 10, severity: int = 5) -> StreamSpec:
    return StreamSpec(tuple(DomainSpec(c, severity) for c in TARGET_FAMILIES), frames_per_domain, rounds, seed)


# ----------------------------------------------------------------- scenes


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    level = rng.uniform(BACKGROUND_LOW, BACKGROUND_HIGH)
    coarse = rng.uniform(-0.5, 0.5, size=(5, 5))
    # bilinear upsample of a coarse field plus fine grain
    t = np.linspace(0, 4, size)
    i0 = np.minimum(t.astype(int), 3)
    f = t - i0
    rowsx = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    field_ = rowsx[:, i0] * (1 - f)[None, :] + rowsx[:, i0 + 1] * f[None, :]
    img = level + TEXTURE * field_ + rng.normal(0.0, rng.uniform(GRAIN_LOW, GRAIN_HIGH), size=(size, size))
    # unlabeled specks so that tiny blobs are not objects
    for _ in range(int(rng.integers(0, MAX_SPECKS + 1))):
        k = int(rng.integers(1, 3))
        y, x = (int(v) for v in rng.integers(0, size - k + 1, size=2))
        img[y : y + k, x : x + k] += rng.choice((-1.0, 1.0)) * rng.uniform(0.2, 0.4)
    return img


def _shape_mask(cls: int, w: int, h: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    if cls == 0:
        m[:] = True
    elif cls == 1:
        t = max(2, min(w, h) // 4)
        m[:] = True
        m[t:-t, t:-t] = False
    elif cls == 2:
        yy, xx = np.mgrid[0:h, 0:w]
        m = ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0 + 1e-9
    else:
        tw, th = max(2, round(w / 3)), max(2, round(h / 3))
        x0, y0 = (w - tw) // 2, (h - th) // 2
        m[:, x0 : x0 + tw] = True
        m[y0 : y0 + th, :] = True
    return m


def gen_scene(rng: np.random.Generator, size: int = IMAGE_SIZE, n_objects: int | None = None) -> Scene:
    """Random non-overlapping shapes (pairwise IoU < 0.2) with tight boxes."""
    img = _background(rng, size)
    want = int(rng.integers(1, MAX_OBJECTS + 1)) if n_objects is None else n_objects
    placed: list[np.ndarray] = []
    labels: list[Detection] = []
    attempts = 0
    while len(placed) < want and attempts < PLACEMENT_ATTEMPTS:
        attempts += 1
        w, h = (int(v) for v in rng.integers(MIN_SIDE, MAX_SIDE + 1, size=2))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        corners = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64) / size
        if placed and box_iou_matrix(corners[None], np.array(placed)).max() >= MAX_PAIR_IOU:
            continue
        cls = int(rng.integers(0, NUM_CLASSES))
        mask = _shape_mask(cls, w, h)
        patch = img[y0 : y0 + h, x0 : x0 + w]
        local = float(patch[~mask].mean()) if (~mask).any() else float(patch.mean())
        level = local + CLASS_POLARITY[cls] * rng.uniform(OBJECT_CONTRAST_LOW, OBJECT_CONTRAST_HIGH)
        patch[mask] = level + rng.normal(0.0, GRAIN, size=int(mask.sum()))
        placed.append(corners)
        labels.append(Detection(Box.from_corners(*corners), cls, 1.0))
    if not labels:  # unreachable for sane sizes: the first attempt always succeeds
        raise RuntimeError("scene placement failed")
    return Scene(Image(np.clip(img, 0.0, 1.0)[None], "none"), labels)


# ------------------------------------------------------------- corruption


def _box3(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, 1, mode="edge")
    h, w = x.shape
    return sum(p[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)) / 9.0


def corrupt(scene: Scene, spec: DomainSpec, rng: np.random.Generator) -> Scene:
    """Apply one corruption family; labels pass through untouched."""
    x = scene.image.pixels[0].copy()
    s = int(spec.severity)
    c = spec.corruption
    if c == "none":
        return Scene(Image(x[None], spec.tag), scene.labels)
    if c == "gaussian_noise":
        x = x + rng.normal(0.0, NOISE_SIGMA_PER_LEVEL * s, size=x.shape)
    elif c == "blur":
        for _ in range(s):
            x = _box3(x)
    elif c == "brightness":
        x = x + BRIGHTNESS_PER_LEVEL * s
    elif c == "contrast":
        x = (x - 0.5) * (1.0 - CONTRAST_PER_LEVEL * s) + 0.5
    elif c == "occlusion_snow":
        flakes = rng.random(x.shape) < SNOW_DENSITY_PER_LEVEL * s
        x = np.where(flakes, 1.0, x)
    return Scene(Image(np.clip(x, 0.0, 1.0)[None], spec.tag), scene.labels)


# ---------------------------------------------------------------- streams


@dataclass
class Frame:
    scene: Scene
    domain_tag: str
    round_index: int
    domain_index: int
    frame_index: int  # global position in the stream


def frame_rng(seed: int, round_index: int, domain_index: int, frame: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_index, domain_index, frame]))


def build_stream(spec: StreamSpec) -> Iterator[Frame]:
    """Yield frames in schedule order: round-major, then domain, then frame."""
    k = 0
    for r in range(spec.rounds):
        for d, dom in enumerate(spec.domain_sequence):
            for f in range(spec.frames_per_domain):
                rng = frame_rng(spec.seed, r, d, f)
                scene = corrupt(gen_scene(rng), dom, rng)
                yield Frame(scene, dom.tag, r, d, k)
                k += 1


def prefetch(frames: Iterator[Frame], maxsize: int = 32) -> Iterator[Frame]:
    """Generate frames on a background thread through a bounded queue, preserving order."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()

    def worker():
        try:
            for fr in frames:
                q.put(fr)
        finally:
            q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()


def clean_scenes(seed: int, n: int, size: int = IMAGE_SIZE) -> list[Scene]:
    """Uncorrupted scenes for source training and held-out checks."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50]))
    return [gen_scene(rng, size) for _ in range(n)]


# ------------------------------------------------------------ source model


class SourceModelError(RuntimeError):
    """The pretrained source model misses the minimum clean-domain quality."""


def evaluate_clean(store, scenes: list[Scene], score_floor: float = 0.05) -> float:
    from .evaluation import make_record, mean_ap
    from .toydet import detect

    recs = [make_record(i, "none", 0, 0, "pause", detect(s.image, store, score_floor), s.labels) for i, s in enumerate(scenes)]
    return mean_ap(recs)


def pretrain_source(
    model_cfg=None,
    n_frames: int = 3000,
    epochs: int = 12,
    seed: int = 0,
    lr: float = 0.01,
    momentum: float = 0.9,
    heldout: int = 200,
    target_map: float = 0.85,
    min_map: float = 0.6,
    log=None,
):
    """Supervised SGD (batch size 1, momentum) on clean scenes.

    Stops after the first epoch whose held-out clean mAP@0.5 reaches
    ``target_map``. Returns ``(source_store, provenance)``.
    """
    from . import autodiff as ad
    from .toydet import DetectorConfig, ParamStore, bind, init_params, supervised_loss

    model_cfg = model_cfg or DetectorConfig()
    store = init_params(model_cfg, seed)
    train = clean_scenes(seed, n_frames, model_cfg.image_size)
    held = clean_scenes(seed + 10_000, heldout, model_cfg.image_size)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    layers = {k: v.copy() for k, v in store.items()}
    vel = {k: np.zeros_like(v) for k, v in layers.items()}
    history = []
    for ep in range(epochs):
        step = lr * 0.5 * (1.0 + np.cos(np.pi * ep / epochs))  # cosine decay per epoch
        for i in order_rng.permutation(len(train)):
            sc = train[i]
            g = ad.Graph()
            w = bind(ParamStore(layers), g, trainable=True)
            grads = g.backward(supervised_loss(sc.image, sc.labels, w, top_l=model_cfg.top_l))
            for k in layers:
                vel[k] = momentum * vel[k] + grads[k]
                layers[k] = layers[k] - step * vel[k]
        score = evaluate_clean(ParamStore(layers), held)
        history.append(score)
        if log:
            log(f"epoch {ep + 1}/{epochs}: clean mAP@0.5 = {score:.4f}")
        if score >= target_map:
            break
    final = history[-1]
    if final < min_map:
        raise SourceModelError(f"source model reached clean mAP {final:.3f} < required {min_map}")
    provenance = {
        "seed": seed,
        "frames": n_frames,
        "epochs_run": len(history),
        "lr": lr,
        "momentum": momentum,
        "heldout": heldout,
        "clean_map": final,
        "history": history,
    }
    return ParamStore(layers, "source"), provenance
