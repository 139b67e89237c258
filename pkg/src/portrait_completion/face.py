"""Residual face refinement trained against a frozen completion generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint, as_module, capture_rng_state, checkpoint_from_module
from .completion import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    PROB_EPS,
    gan_losses,
    generator_input,
)
from .data import FACE, DatasetConfig, apply_mask, augment, sample_hole_mask, scaled
from .errors import FaceNotFoundError, ValidationError
from .layers import image_to_tensor, mask_to_tensor, parsing_condition, tensor_to_image
from .perception import PerceptionConfig, PerceptionNet, perceptual_loss

log = logging.getLogger(__name__)


def face_net_config(num_classes=8, **kw) -> GeneratorConfig:
    """Generator layout with the residual blocks cut to four (two per side)."""
    kw = {"n_front_resblocks": 2, "n_back_resblocks": 2, "dilation_rates": (2,), **kw}
    return GeneratorConfig(num_classes=num_classes, **kw)


class FaceNet(Generator):
    """Same topology as the completion generator; its tanh output is a residual image."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__(config or face_net_config())


@dataclass
class FaceCrop:
    window: tuple  # (top, left, height, width)
    g_f: np.ndarray
    p_f: np.ndarray
    m_f: np.ndarray
    r_f: np.ndarray | None = None


def face_center(parsing_map, face_classes=(FACE,)) -> tuple[int, int]:
    """Centroid of the face-class pixels, each axis rounded half-up."""
    ys, xs = np.nonzero(np.isin(np.asarray(parsing_map), face_classes))
    if len(ys) == 0:
        raise FaceNotFoundError("parsing map has no face pixels")
    return int(np.floor(ys.mean() + 0.5)), int(np.floor(xs.mean() + 0.5))


def default_face_window(size) -> tuple[int, int]:
    """Square window side: 64 at a 256-row image, a multiple of 4, no larger than the image."""
    h, w = size
    side = 4 * max(1, round(scaled(64, h) / 4))
    side = min(side, 4 * (min(h, w) // 4))
    if side < 4:
        raise ValidationError(f"image {h}x{w} is too small for a face window")
    return side, side


def face_window(center, size, window=None) -> tuple[int, int, int, int]:
    """(top, left, height, width) of the face window centred on ``center``, clamped in-bounds."""
    h, w = size
    wh, ww = window if window is not None else default_face_window(size)
    cy, cx = center
    top = min(max(cy - wh // 2, 0), h - wh)
    left = min(max(cx - ww // 2, 0), w - ww)
    return top, left, wh, ww


def crop_face(image, parsing_map, mask, face_classes=(FACE,), window=None) -> FaceCrop:
    m = getattr(mask, "mask", mask)
    top, left, wh, ww = face_window(face_center(parsing_map, face_classes), m.shape, window)
    sl = (slice(top, top + wh), slice(left, left + ww))
    return FaceCrop((top, left, wh, ww), np.asarray(image)[sl], np.asarray(parsing_map)[sl], np.asarray(m)[sl])


def refine_face(completion_output, parsing_map, mask, params, face_classes=(FACE,), window=None) -> np.ndarray:
    """Add the predicted residual inside the face window and clamp to [-1, 1]."""
    net = as_module(params, "face")
    crop = crop_face(completion_output, parsing_map, mask, face_classes, window)
    x = generator_input(crop.g_f, crop.p_f, crop.m_f, net.config.num_classes)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        crop.r_f = tensor_to_image(net(x))
    net.train(was_training)
    top, left, wh, ww = crop.window
    out = np.array(completion_output, dtype=np.float32, copy=True)
    out[top:top + wh, left:left + ww] += crop.r_f
    return np.clip(out, -1.0, 1.0)


def face_objective(target_crop, refined_crop, d_fake, perception, lam: float = 10.0, adversarial="minimax"):
    """lam * perceptual(target, refined) + adversarial term on D_f(p_f, refined).

    ``adversarial="minimax"`` gives log(1 - D); ``"non-saturating"`` the
    -log D surrogate used for the refinement updates.
    """
    l_p = perceptual_loss(target_crop, refined_crop, perception)
    if not isinstance(d_fake, torch.Tensor):
        d_fake = torch.as_tensor(d_fake, dtype=refined_crop.dtype)
    d = d_fake.clamp(PROB_EPS, 1 - PROB_EPS)
    if adversarial == "minimax":
        l_adv = torch.log1p(-d).mean()
    elif adversarial == "non-saturating":
        _, l_adv = gan_losses(torch.ones_like(d), d)
    else:
        raise ValueError(f"unknown adversarial form {adversarial!r}")
    return lam * l_p + l_adv, {"perceptual": l_p, "adversarial": l_adv}


def train_face(dataset, frozen_G, config: GeneratorConfig | None = None,
               perc_config: PerceptionConfig | None = None, epochs: int = 1, seed: int = 0,
               data_config: DatasetConfig | None = None, *, lam: float = 10.0, lr: float = 2e-4,
               betas=(0.5, 0.999), augmentation: bool = True, max_steps: int | None = None,
               disc_channels: int = 16) -> Checkpoint:
    """Train F and D_f on face-centred crops; the completion generator stays fixed.

    Each step masks a 32 x 32 (scaled) box inside the face, runs the frozen
    generator, crops the 64 x 64 (scaled) window around the face centroid and
    updates D_f then F.  Samples without face pixels are skipped.
    """
    dataset = list(dataset)
    G = as_module(frozen_G, "generator")
    num_classes = G.config.num_classes
    config = config or face_net_config(num_classes)
    size = dataset[0].size if dataset else (0, 0)
    data_config = data_config or DatasetConfig(num_classes=num_classes, image_size=size)
    face_classes = data_config.face_classes
    if not any(np.isin(s.labels, face_classes).any() for s in dataset):
        raise ValidationError("train_face needs at least one sample with visible face pixels")

    g_digest = _digest(G)
    for p in G.parameters():
        p.requires_grad_(False)
    G.eval()

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = FaceNet(config)
    win = default_face_window(size)
    D_f = Discriminator(DiscriminatorConfig(input_size=win, n_layers=5, base_channels=disc_channels))
    perception = PerceptionNet(perc_config)
    opt_f = torch.optim.Adam(net.parameters(), lr=lr, betas=betas)
    opt_d = torch.optim.Adam(D_f.parameters(), lr=lr, betas=betas)
    net.train()
    D_f.train()

    trace, step, skipped = [], 0, 0
    for epoch in range(epochs):
        sums, n = {}, 0
        for idx in rng.permutation(len(dataset)):
            if max_steps is not None and step >= max_steps:
                break
            sample = dataset[idx]
            if augmentation:
                sample = augment(sample, rng, data_config)
            if not np.isin(sample.labels, face_classes).any():
                skipped += 1
                continue
            mask = sample_hole_mask(sample, rng, "face", face_classes=face_classes)
            masked = apply_mask(sample.image, mask, data_config.mean_pixel)
            with torch.no_grad():
                g_out = G(generator_input(masked, sample.labels, mask, num_classes))
            top, left, wh, ww = face_window(face_center(sample.labels, face_classes), sample.size, win)
            sl = (Ellipsis, slice(top, top + wh), slice(left, left + ww))
            g_f = g_out[sl]
            x_f = image_to_tensor(sample.image)[sl]
            p_f = parsing_condition(sample.labels, num_classes)[sl]
            m_f = mask_to_tensor(mask)[sl]

            refined = net(torch.cat([g_f, p_f, m_f], 1)) + g_f

            d_loss, _ = gan_losses(D_f(torch.cat([x_f, p_f], 1)), D_f(torch.cat([refined.detach(), p_f], 1)))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            total, parts = face_objective(x_f, refined, D_f(torch.cat([refined, p_f], 1)), perception,
                                          lam, adversarial="non-saturating")
            opt_f.zero_grad()
            total.backward()
            opt_f.step()

            record = {k: float(v.detach()) for k, v in parts.items()}
            record.update(loss=total.item(), d_loss=d_loss.item())
            for k, v in record.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
            step += 1
        if n == 0:
            break
        trace.append({k: v / n for k, v in sums.items()})
        log.info("face epoch %d: loss %.4f", epoch, trace[-1]["loss"])

    if _digest(G) != g_digest:
        raise RuntimeError("completion generator changed during face training")
    net.eval()
    meta = {"steps": step, "seed": seed, "lambda": lam, "skipped": skipped,
            "generator_digest": g_digest, "face_classes": list(face_classes),
            "mean_pixel": list(data_config.mean_pixel)}
    ckpt = checkpoint_from_module(net, "face", trace=trace, meta=meta, rng_state=capture_rng_state(rng))
    ckpt.companions["disc-face"] = checkpoint_from_module(D_f.eval(), "disc-face")
    return ckpt


def _digest(net) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
