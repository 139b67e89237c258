"""Run configuration and the parse -> complete -> refine -> blend inference chain."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .blend import BlendProblem, poisson_blend
from .checkpoint import Checkpoint, as_module, load_checkpoint
from .completion import CompletionLossConfig, GeneratorConfig, complete_forward
from .data import FACE, DatasetConfig, HoleMask, apply_mask, scaled
from .errors import FaceNotFoundError, PreconditionError, ShapeError, ValidationError
from .face import face_center, face_net_config, face_window, refine_face
from .parsing import ParsingNetConfig, parse_forward
from .perception import PerceptionConfig

log = logging.getLogger(__name__)

EXTRAP_ROWS = {"down": 64, "up": 32}  # rows appended at the 256 reference size


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    """Everything a training or inference run needs, loadable from JSON.

    Nested sections map one-to-one onto the module config dataclasses; keys
    left out fall back to their defaults.
    """

    data: DatasetConfig = field(default_factory=DatasetConfig)
    parsing: ParsingNetConfig = field(default_factory=ParsingNetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    face: GeneratorConfig = field(default_factory=face_net_config)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    loss: CompletionLossConfig = field(default_factory=CompletionLossConfig)
    seed: int = 0
    epochs: dict = field(default_factory=lambda: {"parse": 1, "complete": 1, "face": 1})
    max_steps: dict = field(default_factory=dict)
    parse_lr: float = 1e-4
    complete_lr: float = 2e-4
    face_lambda: float = 10.0
    augmentation: bool = True
    out_dir: str = "runs"

    _SECTIONS = {"data": DatasetConfig, "parsing": ParsingNetConfig, "generator": GeneratorConfig,
                 "face": GeneratorConfig, "perception": PerceptionConfig, "loss": CompletionLossConfig}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in raw.items():
            section = cls._SECTIONS.get(key)
            if section is not None:
                if not isinstance(value, dict):
                    raise ValidationError(f"config section {key!r} must be an object")
                build = face_net_config if key == "face" else section
                try:
                    kw[key] = build(**value)
                except TypeError as exc:
                    raise ValidationError(f"bad {key!r} section: {exc}") from exc
            else:
                kw[key] = value
        cfg = cls(**kw)
        for stage in ("parse", "complete", "face"):
            cfg.epochs.setdefault(stage, 1)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoints:
    """The networks an inference run consumes; ``face`` is optional."""

    parsing: object
    generator: object
    face: object = None

    @classmethod
    def load(cls, parsing, generator, face=None) -> "Checkpoints":
        return cls(load_checkpoint(parsing, "parsing"), load_checkpoint(generator, "generator"),
                   load_checkpoint(face, "face") if face else None)

    def modules(self):
        return (as_module(self.parsing, "parsing"), as_module(self.generator, "generator"),
                as_module(self.face, "face") if self.face is not None else None)

    def meta(self, key, default=None):
        for ck in (self.generator, self.parsing, self.face):
            if isinstance(ck, Checkpoint) and key in ck.meta:
                return ck.meta[key]
        return default


# --------------------------------------------------------------- inference


def _pad_amount(n, multiple):
    return (-n) % multiple


def _pad(arr, ph, pw):
    if ph == 0 and pw == 0:
        return arr
    spec = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    mode = "reflect" if ph < arr.shape[0] and pw < arr.shape[1] else "symmetric"
    return np.pad(arr, spec, mode=mode)


def _resize(arr, size, order):
    h, w = arr.shape[:2]
    zoom = (size[0] / h, size[1] / w) + (1,) * (arr.ndim - 2)
    return ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=True)


def _window_touches(window, mask) -> bool:
    top, left, wh, ww = window
    return bool(mask[top:top + wh, left:left + ww].any())


def _fill(image, mask, nets, mean_pixel, face_classes, seed, dropout, trace):
    """Parse, complete and refine at the image's own size (already stride-aligned).

    Returns the full generated frame: the generator's raw output everywhere,
    with the refined face inside the unknown region.  Known pixels are not
    composited here so the blend can see the generated gradients at the seam.
    """
    parser, generator, face = nets
    masked = apply_mask(image, mask, mean_pixel)
    labels = parse_forward(masked, mask, parser).label_map
    trace.append("parse")
    raw = complete_forward(masked, labels, mask, generator, seed=seed, dropout=dropout)
    trace.append("complete")
    if face is None:
        reason = "no face network"
    else:
        try:
            window = face_window(face_center(labels, face_classes), mask.shape)
        except FaceNotFoundError:
            window, reason = None, "no face pixels in the predicted parsing"
        else:
            reason = None if _window_touches(window, mask) else "face window does not overlap the unknown region"
    if reason is not None:
        trace.append("face-skipped")
        log.info("face stage skipped: %s", reason)
        return raw
    composited = np.where(mask[..., None] != 0, raw, masked)
    refined = refine_face(composited, labels, mask, face, face_classes)
    trace.append("face")
    return np.where(mask[..., None] != 0, refined, raw).astype(np.float32)


def run_inference(image, mask, checkpoints: Checkpoints, *, seed: int = 0, dropout: bool = False,
                  blend: bool = True, blend_tol: float = 1e-6, work_size=None,
                  face_classes=None, trace: list | None = None) -> np.ndarray:
    """Complete every hole of ``image`` in one pass and return an H x W x 3 float32 image.

    Pixels where ``mask`` is 0 are returned exactly as given.  Inputs whose
    sides are not multiples of the network stride are reflect-padded and
    cropped back.  ``work_size=(h, w)`` runs the networks at that resolution
    and resizes the fill back before compositing.  Stage names are appended
    to ``trace`` in execution order.
    """
    trace = [] if trace is None else trace
    image = np.asarray(image, dtype=np.float32)
    m = np.asarray(getattr(mask, "mask", mask)) != 0
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got {image.shape}")
    if m.shape != image.shape[:2]:
        raise ShapeError(f"mask {m.shape} does not match image {image.shape[:2]}")
    if not m.any():
        trace.append("identity")
        return image.copy()

    nets = checkpoints.modules()
    mean_pixel = checkpoints.meta("mean_pixel", (0.0, 0.0, 0.0))
    face_classes = tuple(face_classes or checkpoints.meta("face_classes", (FACE,)))
    stride = math.lcm(nets[0].stride, nets[1].downsample_factor)
    h, w = m.shape

    if work_size is not None:
        wh, ww = (int(v) for v in work_size)
        if wh % stride or ww % stride:
            raise ShapeError(f"work_size must be a multiple of {stride}")
        img_w = _resize(image, (wh, ww), 1).astype(np.float32)
        m_w = _resize(m.astype(np.uint8), (wh, ww), 0)
        m_w = np.maximum(m_w, _resize(m.astype(np.float32), (wh, ww), 1) > 0).astype(np.uint8)
        filled = _fill(img_w, m_w, nets, mean_pixel, face_classes, seed, dropout, trace)
        filled = _resize(filled, (h, w), 1).astype(np.float32)
    else:
        ph, pw = _pad_amount(h, stride), _pad_amount(w, stride)
        img_p = _pad(image, ph, pw)
        m_p = _pad(m.astype(np.uint8), ph, pw)
        filled = _fill(img_p, m_p, nets, mean_pixel, face_classes, seed, dropout, trace)[:h, :w]

    out = np.where(m[..., None], filled, image).astype(np.float32)
    if blend:
        # holes are separate 8-connected components, so each one only sees original pixels on its border
        out = image.copy()
        for comp in HoleMask.from_array(m).components():
            out = poisson_blend(BlendProblem(filled, out, comp, tol=blend_tol)).astype(np.float32)
        trace.append("blend")
    # the blend leaves known pixels untouched; keep that contract explicit
    return np.where(m[..., None], out, image).astype(np.float32)


def extrapolation_canvas(image, direction: str, mean_pixel=(0.0, 0.0, 0.0)):
    """Grow ``image`` by the strip for ``direction``; returns (canvas, mask, rows)."""
    if direction not in EXTRAP_ROWS:
        raise ValidationError(f"direction must be one of {sorted(EXTRAP_ROWS)}, got {direction!r}")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    rows = scaled(EXTRAP_ROWS[direction], h)
    strip = np.broadcast_to(np.asarray(mean_pixel, dtype=np.float32), (rows, w, 3))
    mask = np.zeros((h + rows, w), dtype=np.uint8)
    if direction == "down":
        canvas = np.concatenate([image, strip], 0)
        mask[h:] = 1
    else:
        canvas = np.concatenate([strip, image], 0)
        mask[:rows] = 1
    return canvas, mask, rows


def extrapolate(image, direction: str, checkpoints: Checkpoints, *, seed: int = 0,
                dropout: bool = True, trace: list | None = None, **kw) -> np.ndarray:
    """Append rows below (``down``) or above (``up``) and synthesize them.

    Needs a generator trained in extrapolation mode; dropout stays active so
    different seeds give different continuations.
    """
    G = as_module(checkpoints.generator, "generator")
    if not G.config.extrapolation_mode:
        raise PreconditionError("extrapolate needs a generator trained with extrapolation_mode=True")
    canvas, mask, _ = extrapolation_canvas(image, direction, checkpoints.meta("mean_pixel", (0.0, 0.0, 0.0)))
    return run_inference(canvas, mask, checkpoints, seed=seed, dropout=dropout, trace=trace, **kw)
