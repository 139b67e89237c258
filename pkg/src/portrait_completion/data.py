"""Portrait samples, hole masks, augmentation and synthetic figures.

Images are float32 H x W x 3 arrays in [-1, 1]; labels are int64 H x W maps;
keypoints are K x 3 float arrays of (x, y, visible) in pixel units with the
origin at the top-left pixel centre.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    DatasetLoadError,
    GenerationError,
    PreconditionError,
    ShapeError,
    ValidationError,
)

log = logging.getLogger(__name__)

# Class layout of the synthetic figures.
BACKGROUND, HAIR, FACE, TORSO, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = range(8)
SYNTHETIC_CLASSES = 8
SYNTHETIC_LABEL_PAIRS = ((LEFT_ARM, RIGHT_ARM), (LEFT_LEG, RIGHT_LEG))

KEYPOINT_NAMES = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
SYNTHETIC_KEYPOINT_PAIRS = ((2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13))

MASK_MODES = ("train-random", "face", "extrap-down", "extrap-up")


@dataclass
class LabeledPortrait:
    image: np.ndarray
    labels: np.ndarray
    keypoints: np.ndarray
    source_id: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape[:2]

    def validate(self, num_classes: int) -> "LabeledPortrait":
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"{self.source_id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.labels.shape:
            raise ShapeError(
                f"{self.source_id}: image {self.image.shape[:2]} and labels "
                f"{self.labels.shape} differ in size"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise ValidationError(
                f"{self.source_id}: label value {int(self.labels.max())} outside [0, {num_classes})"
            )
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        h, w = self.labels.shape
        vis = kp[:, 2] > 0
        if np.any((kp[vis, 0] < 0) | (kp[vis, 0] >= w) | (kp[vis, 1] < 0) | (kp[vis, 1] >= h)):
            raise ValidationError(f"{self.source_id}: visible keypoint outside the image")
        return self


@dataclass
class HoleMask:
    """Binary unknown-region mask (1 = unknown) plus the holes' boxes (x0, y0, w, h)."""

    mask: np.ndarray
    holes: list = field(default_factory=list)

    @classmethod
    def empty(cls, size) -> "HoleMask":
        return cls(np.zeros(size, dtype=np.uint8), [])

    @classmethod
    def from_boxes(cls, size, boxes) -> "HoleMask":
        h, w = size
        mask = np.zeros((h, w), dtype=np.uint8)
        holes = []
        for x0, y0, bw, bh in boxes:
            x0, y0, bw, bh = int(x0), int(y0), int(bw), int(bh)
            if bw <= 0 or bh <= 0 or x0 < 0 or y0 < 0 or x0 + bw > w or y0 + bh > h:
                raise ValidationError(f"hole box {(x0, y0, bw, bh)} outside {w}x{h} image")
            if mask[y0:y0 + bh, x0:x0 + bw].any():
                raise ValidationError("hole boxes must be pairwise disjoint")
            mask[y0:y0 + bh, x0:x0 + bw] = 1
            holes.append((x0, y0, bw, bh))
        return cls(mask, holes)

    @classmethod
    def from_array(cls, mask) -> "HoleMask":
        """Free-form mask; holes are the bounding boxes of its 8-connected components."""
        mask = (np.asarray(mask) != 0).astype(np.uint8)
        if mask.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
        comps, _ = ndimage.label(mask, structure=np.ones((3, 3)))
        holes = []
        for sl in ndimage.find_objects(comps):
            ys, xs = sl
            holes.append((xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start))
        return cls(mask, holes)

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def is_empty(self) -> bool:
        return not self.mask.any()

    def components(self) -> list[np.ndarray]:
        """Boolean mask of each connected hole, in the order of ``holes``."""
        comps, n = ndimage.label(self.mask, structure=np.ones((3, 3)))
        return [comps == i for i in range(1, n + 1)]

    def is_rectangular(self) -> bool:
        covered = np.zeros_like(self.mask)
        for x0, y0, w, h in self.holes:
            covered[y0:y0 + h, x0:x0 + w] += 1
        return bool(covered.max(initial=0) <= 1 and np.array_equal(covered, self.mask))


@dataclass
class DatasetConfig:
    root: str = ""
    split: str = ""
    num_classes: int = SYNTHETIC_CLASSES
    num_keypoints: int = len(KEYPOINT_NAMES)
    image_size: tuple = (256, 256)
    flip_label_pairs: tuple = SYNTHETIC_LABEL_PAIRS
    flip_keypoint_pairs: tuple = SYNTHETIC_KEYPOINT_PAIRS
    mean_pixel: tuple = (0.0, 0.0, 0.0)
    scale_range: tuple = (0.8, 1.2)
    face_classes: tuple = (FACE,)
    heatmap_sigma: float = 3.0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.flip_label_pairs = tuple(tuple(int(v) for v in p) for p in self.flip_label_pairs)
        self.flip_keypoint_pairs = tuple(tuple(int(v) for v in p) for p in self.flip_keypoint_pairs)
        self.mean_pixel = tuple(float(v) for v in self.mean_pixel)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.face_classes = tuple(int(v) for v in self.face_classes)
        for a, b in self.flip_label_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes):
                raise ValidationError(f"flip label pair {(a, b)} out of range")
        for a, b in self.flip_keypoint_pairs:
            if not (0 <= a < self.num_keypoints and 0 <= b < self.num_keypoints):
                raise ValidationError(f"flip keypoint pair {(a, b)} out of range")
        if len(self.mean_pixel) != 3 or any(abs(v) > 1 for v in self.mean_pixel):
            raise ValidationError("mean_pixel must be a 3-vector in [-1, 1]")


def scaled(length: int, size: int, reference: int = 256) -> int:
    """Scale a length given at the reference training size to ``size``."""
    return max(1, int(round(length * size / reference)))


# ---------------------------------------------------------------- image io


def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 127.5 - 1.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


def read_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def read_mask(path) -> HoleMask:
    arr = np.asarray(Image.open(path).convert("L"))
    return HoleMask.from_array(arr != 0)


def write_mask(path, mask: HoleMask) -> None:
    Image.fromarray((mask.mask != 0).astype(np.uint8) * 255, mode="L").save(path)


def _data_dir(config: DatasetConfig) -> Path:
    root = Path(config.root)
    return root / config.split if config.split else root


def load_dataset(config: DatasetConfig) -> list[LabeledPortrait]:
    """Read ``images/<id>.png``, ``labels/<id>.png`` and ``keypoints.json``."""
    root = _data_dir(config)
    image_dir = root / "images"
    ids = sorted(p.stem for p in image_dir.glob("*.png")) if image_dir.is_dir() else []
    if not ids:
        return []
    kp_path = root / "keypoints.json"
    try:
        keypoints = json.loads(kp_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetLoadError(f"cannot read {kp_path}: {exc}") from exc

    samples = []
    for sid in ids:
        label_path = root / "labels" / f"{sid}.png"
        try:
            image = read_image(image_dir / f"{sid}.png")
            labels = read_label_png(label_path)
        except OSError as exc:
            raise DatasetLoadError(f"sample {sid!r}: {exc}") from exc
        if sid not in keypoints:
            raise DatasetLoadError(f"sample {sid!r}: no entry in keypoints.json")
        kp = np.asarray(keypoints[sid], dtype=np.float64).reshape(-1, 3)
        if len(kp) != config.num_keypoints:
            raise ValidationError(
                f"{sid}: expected {config.num_keypoints} keypoints, found {len(kp)}"
            )
        samples.append(LabeledPortrait(image, labels, kp, sid).validate(config.num_classes))
    return samples


def write_dataset(samples: Sequence[LabeledPortrait], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    keypoints = {}
    for s in samples:
        write_image(root / "images" / f"{s.source_id}.png", s.image)
        Image.fromarray(s.labels.astype(np.uint8), mode="L").save(root / "labels" / f"{s.source_id}.png")
        keypoints[s.source_id] = np.asarray(s.keypoints).tolist()
    (root / "keypoints.json").write_text(json.dumps(keypoints, indent=1))


def compute_mean_pixel(samples: Sequence[LabeledPortrait]) -> tuple:
    if not samples:
        return (0.0, 0.0, 0.0)
    sums = sum(s.image.reshape(-1, 3).astype(np.float64).mean(axis=0) for s in samples)
    return tuple(float(v) for v in sums / len(samples))


# ------------------------------------------------------ synthetic figures


def _capsule_dist(yy, xx, p, q):
    """Distance from each pixel to the segment p-q (points given as (x, y))."""
    px, py = p
    qx, qy = q
    dx, dy = qx - px, qy - py
    denom = dx * dx + dy * dy
    if denom == 0:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - px) * dx + (yy - py) * dy) / denom, 0.0, 1.0)
    return np.hypot(xx - (px + t * dx), yy - (py + t * dy))


def _texture(rng, yy, xx, base, amplitude):
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 12.0)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
    return base[None, None, :] + amplitude * wave[..., None]


def _limb(start, angle, length):
    # angle measured from straight down, positive towards +x
    return (start[0] + length * np.sin(angle), start[1] + length * np.cos(angle))


def _render_figure(rng: np.random.Generator, h: int, w: int, sid: str) -> LabeledPortrait:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    c0, c1 = rng.uniform(-0.9, 0.9, 3), rng.uniform(-0.9, 0.9, 3)
    t = (xx / max(w - 1, 1) * rng.uniform(0.3, 0.7) + yy / max(h - 1, 1) * rng.uniform(0.3, 0.7))
    image = c0 + (c1 - c0) * t[..., None]
    image = image + _texture(rng, yy, xx, np.zeros(3), 0.08)
    labels = np.zeros((h, w), dtype=np.int64)

    fh = rng.uniform(0.74, 0.88) * h
    top = rng.uniform(0.03 * h, h - fh - 0.03 * h)
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    r_head = 0.11 * fh
    head = (cx + rng.uniform(-0.02, 0.02) * fh, top + r_head)
    neck = (cx, top + 2 * r_head)
    hip_y = top + 0.56 * fh
    sh_y = neck[1] + 0.05 * fh
    r_sh, l_sh = (cx - 0.13 * fh, sh_y), (cx + 0.13 * fh, sh_y)
    r_hip, l_hip = (cx - 0.07 * fh, hip_y), (cx + 0.07 * fh, hip_y)

    def arm(shoulder, side):
        a1 = side * rng.uniform(0.2, 1.3)
        a2 = a1 + side * rng.uniform(-0.5, 1.0)
        elbow = _limb(shoulder, a1, 0.17 * fh)
        return elbow, _limb(elbow, a2, 0.15 * fh)

    def leg(hip, side):
        a1 = side * rng.uniform(-0.05, 0.35)
        a2 = a1 + side * rng.uniform(-0.25, 0.15)
        knee = _limb(hip, a1, 0.21 * fh)
        return knee, _limb(knee, a2, 0.21 * fh)

    r_elb, r_wri = arm(r_sh, -1)
    l_elb, l_wri = arm(l_sh, +1)
    r_kne, r_ank = leg(r_hip, -1)
    l_kne, l_ank = leg(l_hip, +1)

    def paint(region, cls, base, amplitude=0.12):
        nonlocal image
        tex = _texture(rng, yy, xx, base, amplitude)
        image = np.where(region[..., None], tex, image)
        labels[region] = cls

    trouser = rng.uniform(-0.8, 0.4, 3)
    for cls, (hip, knee, ankle) in ((RIGHT_LEG, (r_hip, r_kne, r_ank)), (LEFT_LEG, (l_hip, l_kne, l_ank))):
        d = np.minimum(_capsule_dist(yy, xx, hip, knee), _capsule_dist(yy, xx, knee, ankle))
        paint(d <= 0.05 * fh, cls, trouser + rng.uniform(-0.1, 0.1, 3))
    shirt = rng.uniform(-0.6, 0.9, 3)
    torso_d = _capsule_dist(yy, xx, (cx, neck[1] + 0.1 * fh), (cx, hip_y - 0.04 * fh))
    paint(torso_d <= 0.12 * fh, TORSO, shirt)
    skin = np.array([0.75, 0.35, 0.15]) + rng.uniform(-0.2, 0.2, 3)
    for cls, (sh, el, wr) in ((RIGHT_ARM, (r_sh, r_elb, r_wri)), (LEFT_ARM, (l_sh, l_elb, l_wri))):
        d = np.minimum(_capsule_dist(yy, xx, sh, el), _capsule_dist(yy, xx, el, wr))
        paint(d <= 0.045 * fh, cls, shirt * 0.6 + skin * 0.4 + rng.uniform(-0.1, 0.1, 3))
    head_d = np.hypot(xx - head[0], yy - head[1])
    head_region = head_d <= r_head
    paint(head_region, FACE, skin, amplitude=0.04)
    paint(head_region & (yy < head[1] - 0.45 * r_head), HAIR, rng.uniform(-0.95, -0.4, 3))

    joints = [head, neck, r_sh, r_elb, r_wri, l_sh, l_elb, l_wri, r_hip, r_kne, r_ank, l_hip, l_kne, l_ank]
    kp = np.zeros((len(joints), 3))
    for k, (x, y) in enumerate(joints):
        # pixel centres sit at integer coordinates, so the image spans [0, w - 1]
        inside = 0 <= x <= w - 1 and 0 <= y <= h - 1
        kp[k] = (np.clip(x, 0, w - 1), np.clip(y, 0, h - 1), 1.0 if inside else 0.0)

    image = np.clip(image, -1.0, 1.0).astype(np.float32)
    return LabeledPortrait(image, labels, kp, sid)


def generate_synthetic_figures(count: int, seed: int, size=(64, 64),
                               num_classes: int = SYNTHETIC_CLASSES) -> list[LabeledPortrait]:
    """Articulated stick figures (hair, face, torso, two arms, two legs) on textured backgrounds.

    Sample ``i`` depends only on ``(seed, i, size)``, so prefixes of a larger
    run are identical to smaller runs.
    """
    if count < 0:
        raise GenerationError("count must be non-negative")
    h, w = int(size[0]), int(size[1])
    if h < 32 or w < 32:
        raise GenerationError(f"image size {h}x{w} too small to place a figure (min 32x32)")
    if num_classes < SYNTHETIC_CLASSES:
        raise GenerationError(f"synthetic figures need num_classes >= {SYNTHETIC_CLASSES}")
    children = np.random.SeedSequence(seed).spawn(count)
    return [
        _render_figure(np.random.default_rng(ss), h, w, f"synth_{seed}_{i:05d}")
        for i, ss in enumerate(children)
    ]


# ------------------------------------------------------------------ masks


def sample_hole_mask(sample: LabeledPortrait, rng: np.random.Generator, mode: str = "train-random",
                     image_size=None, face_classes=(FACE,)) -> HoleMask:
    h, w = image_size if image_size is not None else sample.size
    if mode == "extrap-down":
        rows = scaled(64, h)
        return HoleMask.from_boxes((h, w), [(0, h - rows, w, rows)])
    if mode == "extrap-up":
        return HoleMask.from_boxes((h, w), [(0, 0, w, scaled(32, h))])
    if mode == "train-random":
        ys, xs = np.nonzero(sample.labels > 0)
        if len(ys) == 0:
            raise PreconditionError(f"{sample.source_id}: no body pixels to place a hole on")
        bh = int(rng.integers(scaled(64, h), scaled(128, h), endpoint=True))
        bw = int(rng.integers(scaled(64, w), scaled(128, w), endpoint=True))
        k = int(rng.integers(len(ys)))
        py, px = int(ys[k]), int(xs[k])
        y0 = int(rng.integers(max(0, py - bh + 1), min(py, h - bh), endpoint=True))
        x0 = int(rng.integers(max(0, px - bw + 1), min(px, w - bw), endpoint=True))
        return HoleMask.from_boxes((h, w), [(x0, y0, bw, bh)])
    if mode == "face":
        ys, xs = np.nonzero(np.isin(sample.labels, face_classes))
        if len(ys) == 0:
            raise PreconditionError(f"{sample.source_id}: mode=face requires face pixels")
        bh, bw = scaled(32, h), scaled(32, w)
        y0 = _place_inside(rng, ys.min(), ys.max(), bh, h)
        x0 = _place_inside(rng, xs.min(), xs.max(), bw, w)
        return HoleMask.from_boxes((h, w), [(x0, y0, bw, bh)])
    raise ValueError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")


def _place_inside(rng, lo, hi, length, limit):
    """Start offset of a box of ``length`` inside the span [lo, hi]; centred when the span is shorter."""
    if hi - lo + 1 >= length:
        return int(rng.integers(lo, hi - length + 1, endpoint=True))
    start = int(round((lo + hi) / 2 - (length - 1) / 2))
    return min(max(start, 0), limit - length)


def apply_mask(image: np.ndarray, mask, mean_pixel) -> np.ndarray:
    """Replace unknown pixels with the dataset mean pixel."""
    m = mask.mask if isinstance(mask, HoleMask) else np.asarray(mask)
    image = np.asarray(image)
    if image.shape[:2] != m.shape or image.ndim != 3:
        raise ShapeError(f"image {image.shape} and mask {m.shape} do not agree")
    mean = np.asarray(mean_pixel, dtype=image.dtype).reshape(1, 1, 3)
    return np.where(m[..., None] != 0, mean, image).astype(image.dtype, copy=False)


# --------------------------------------------------------------- heatmaps


def make_pose_heatmaps(keypoints, sigma: float, size) -> np.ndarray:
    """Peak-1 Gaussian per keypoint centred on its nearest pixel; zeros when invisible."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = size
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(kp), h, w), dtype=np.float32)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    for k, (x, y, vis) in enumerate(kp):
        if vis <= 0:
            continue
        cx, cy = np.floor(x + 0.5), np.floor(y + 0.5)
        out[k] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma * sigma))
    return out


# ----------------------------------------------------------- augmentation


def flip_sample(sample: LabeledPortrait, label_pairs, keypoint_pairs) -> LabeledPortrait:
    w = sample.size[1]
    labels = sample.labels[:, ::-1].copy()
    swapped = labels.copy()
    for a, b in label_pairs:
        swapped[labels == a] = b
        swapped[labels == b] = a
    kp = np.array(sample.keypoints, dtype=np.float64).reshape(-1, 3)
    kp[:, 0] = (w - 1) - kp[:, 0]
    for a, b in keypoint_pairs:
        kp[[a, b]] = kp[[b, a]]
    return LabeledPortrait(sample.image[:, ::-1].copy(), swapped, kp, sample.source_id)


def augment(sample: LabeledPortrait, rng: np.random.Generator, config: DatasetConfig) -> LabeledPortrait:
    """Random scale, crop back to ``config.image_size`` and a 50% mirrored flip."""
    h, w = sample.size
    ho, wo = config.image_size if config.image_size else (h, w)
    lo, hi = config.scale_range
    s = float(np.clip(rng.uniform(lo, hi) if hi > lo else lo, 0.25, 4.0))
    zy, zx = s * ho / h, s * wo / w
    span_y, span_x = h * zy - ho, w * zx - wo
    oy = rng.uniform(min(0.0, span_y), max(0.0, span_y))
    ox = rng.uniform(min(0.0, span_x), max(0.0, span_x))
    flip = rng.random() < 0.5

    src_y = (np.arange(ho) + 0.5 + oy) / zy - 0.5
    src_x = (np.arange(wo) + 0.5 + ox) / zx - 0.5
    gy, gx = np.meshgrid(src_y, src_x, indexing="ij")
    image = np.stack(
        [ndimage.map_coordinates(sample.image[..., c], [gy, gx], order=1, mode="nearest")
         for c in range(3)],
        axis=-1,
    ).astype(np.float32)
    iy = np.clip(np.floor(gy + 0.5).astype(np.int64), 0, h - 1)
    ix = np.clip(np.floor(gx + 0.5).astype(np.int64), 0, w - 1)
    labels = sample.labels[iy, ix]

    kp = np.array(sample.keypoints, dtype=np.float64).reshape(-1, 3)
    kp[:, 0] = (kp[:, 0] + 0.5) * zx - ox - 0.5
    kp[:, 1] = (kp[:, 1] + 0.5) * zy - oy - 0.5
    outside = (kp[:, 0] < 0) | (kp[:, 0] > wo - 1) | (kp[:, 1] < 0) | (kp[:, 1] > ho - 1)
    kp[outside, 2] = 0.0
    kp[:, 0] = np.clip(kp[:, 0], 0, wo - 1)
    kp[:, 1] = np.clip(kp[:, 1], 0, ho - 1)

    out = LabeledPortrait(image, labels, kp, sample.source_id)
    if flip:
        out = flip_sample(out, config.flip_label_pairs, config.flip_keypoint_pairs)
    return out
