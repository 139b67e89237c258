"""Stage-II parsing-conditioned completion: generator, conditional discriminators, losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, as_module, capture_rng_state, checkpoint_from_module
from .data import DatasetConfig, HoleMask, apply_mask, augment, sample_hole_mask, scaled
from .errors import ShapeError, ValidationError
from .layers import (
    NORMS,
    ResBlock,
    check_divisible,
    conv_bn_relu,
    image_to_tensor,
    mask_to_tensor,
    norm_layer,
    parsing_condition,
    plan_strided_paddings,
    tensor_to_image,
)
from .perception import PerceptionConfig, PerceptionNet, perceptual_loss

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CONDITION_CHANNELS = 3
GENERATOR_IN_CHANNELS = 3 + CONDITION_CHANNELS + 1


@dataclass
class GeneratorConfig:
    num_classes: int = 8
    base_channels: int = 16
    n_front_resblocks: int = 4
    dilation_rates: tuple = (2, 4, 8)
    n_back_resblocks: int = 4
    extrapolation_mode: bool = False
    dropout: float = 0.5
    norm: str = "instance"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValidationError(f"norm must be one of {NORMS}, got {self.norm!r}")
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        if min(self.base_channels, self.n_front_resblocks, self.n_back_resblocks, len(self.dilation_rates)) < 1:
            raise ValidationError("generator layer counts must all be >= 1")
        if any(r < 1 for r in self.dilation_rates):
            raise ValidationError("dilation rates must be >= 1")


@dataclass
class DiscriminatorConfig:
    input_size: tuple = (256, 256)
    n_layers: int = 7
    base_channels: int = 16
    max_channels: int = 128
    in_channels: int = 3 + CONDITION_CHANNELS

    def __post_init__(self):
        if isinstance(self.input_size, int):
            self.input_size = (self.input_size, self.input_size)
        self.input_size = tuple(int(v) for v in self.input_size)


@dataclass
class CompletionLossConfig:
    lambda_p: float = 100.0
    lambda_g: float = 1.0
    lambda_l: float = 1.0

    def __post_init__(self):
        if min(self.lambda_p, self.lambda_g, self.lambda_l) < 0:
            raise ValidationError("loss weights must be non-negative")


def global_disc_config(size, **kw) -> DiscriminatorConfig:
    return DiscriminatorConfig(input_size=tuple(size), n_layers=7, **kw)


def local_disc_config(size, **kw) -> DiscriminatorConfig:
    h, w = size
    return DiscriminatorConfig(input_size=(scaled(128, h), scaled(128, w)), n_layers=6, **kw)


class Generator(nn.Module):
    """Encoder (1/4 resolution) -> residual + dilated middle -> decoder -> tanh."""

    config_class = GeneratorConfig
    downsample_factor = 4

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        c, norm = cfg.base_channels, cfg.norm
        self.head = conv_bn_relu(GENERATOR_IN_CHANNELS, c, kernel=7, norm=norm)
        self.down = nn.Sequential(conv_bn_relu(c, 2 * c, stride=2, norm=norm),
                                  conv_bn_relu(2 * c, 4 * c, stride=2, norm=norm))
        self.front = nn.Sequential(*[ResBlock(4 * c, norm=norm) for _ in range(cfg.n_front_resblocks)])
        self.middle = nn.Sequential(*[conv_bn_relu(4 * c, 4 * c, dilation=r, norm=norm) for r in cfg.dilation_rates])
        drop = cfg.dropout if cfg.extrapolation_mode else 0.0
        self.back = nn.Sequential(*[ResBlock(4 * c, dropout=drop, norm=norm) for _ in range(cfg.n_back_resblocks)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1, bias=False),
            norm_layer(norm, 2 * c),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1, bias=False),
            norm_layer(norm, c),
            nn.ReLU(inplace=True),
        )
        self.tail = nn.Conv2d(c, 3, 7, padding=3)
        self.forward_passes = 0

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != GENERATOR_IN_CHANNELS:
            raise ShapeError(f"generator expects {GENERATOR_IN_CHANNELS} input channels, got {tuple(x.shape)}")
        check_divisible(x.shape[2], x.shape[3], self.downsample_factor, "generator")
        self.forward_passes += 1
        y = self.down(self.head(x))
        y = self.up(self.back(self.middle(self.front(y))))
        return torch.tanh(self.tail(y))

    def encode(self, x):
        """Feature map at the bottleneck (used for introspection of the 1/4 resolution)."""
        return self.down(self.head(x))


class Discriminator(nn.Module):
    """DCGAN-style conditional critic: kernel-4 stride-2 convs, a stride-1 conv, sigmoid."""

    config_class = DiscriminatorConfig

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = cfg = config or DiscriminatorConfig()
        (pad_h, last_h), (pad_w, last_w) = (plan_strided_paddings(n, cfg.n_layers) for n in cfg.input_size)
        layers, cin = [], cfg.in_channels
        for i in range(cfg.n_layers - 1):
            cout = min(cfg.base_channels * 2 ** i, cfg.max_channels)
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=(pad_h, pad_w), bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        self.features = nn.Sequential(*layers)
        self.final = nn.Conv2d(cin, 1, 4, stride=1, padding=(last_h, last_w))

    def logits(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"discriminator expects {self.config.in_channels} channels, got {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != self.config.input_size:
            raise ShapeError(
                f"discriminator built for {self.config.input_size}, got {tuple(x.shape[-2:])}"
            )
        return self.final(self.features(x)).flatten()

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def zero_final_layer(net: nn.Module) -> None:
    """Zero the last layer so a discriminator outputs 0.5 or a residual net outputs 0."""
    last = net.final if isinstance(net, Discriminator) else net.tail
    with torch.no_grad():
        last.weight.zero_()
        if last.bias is not None:
            last.bias.zero_()


def set_dropout(net: nn.Module, active: bool) -> None:
    for m in net.modules():
        if isinstance(m, nn.Dropout):
            m.train(active)


# ------------------------------------------------------------- inputs


def generator_input(masked_image, parsing_map, mask, num_classes, dtype=torch.float32):
    x = image_to_tensor(masked_image, dtype)
    cond = parsing_condition(parsing_map, num_classes, dtype)
    m = mask_to_tensor(mask, dtype)
    if cond.shape[-2:] != x.shape[-2:] or m.shape[-2:] != x.shape[-2:]:
        raise ShapeError("image, parsing map and mask must share H x W")
    return torch.cat([x, cond, m], dim=1)


def crop_window(size, hole, patch):
    """Top-left corner of a ``patch``-sized window centred on the hole, clamped in-bounds."""
    h, w = size
    ph, pw = patch
    x0, y0, bw, bh = hole
    cy, cx = y0 + bh // 2, x0 + bw // 2
    top = min(max(cy - ph // 2, 0), h - ph)
    left = min(max(cx - pw // 2, 0), w - pw)
    return top, left


def crop_local(image, parsing_map, hole, patch=None):
    """Same hole-centred crop of the image and its parsing map.

    Accepts H x W (x C) arrays or N x C x H x W tensors.  ``patch`` defaults to
    128 x 128 scaled to the image size.
    """
    is_tensor = isinstance(image, torch.Tensor)
    h, w = image.shape[-2:] if is_tensor else image.shape[:2]
    if patch is None:
        patch = (scaled(128, h), scaled(128, w))
    ph, pw = patch
    top, left = crop_window((h, w), hole, patch)
    if is_tensor:
        return (image[..., top:top + ph, left:left + pw], parsing_map[..., top:top + ph, left:left + pw])
    return image[top:top + ph, left:left + pw], parsing_map[top:top + ph, left:left + pw]


def discriminator_input(image, parsing, num_classes, dtype=torch.float32):
    """[image(3), parsing condition(3)] stack; ``parsing`` may be labels or a 3-channel condition."""
    x = image_to_tensor(image, dtype)
    if isinstance(parsing, torch.Tensor) and parsing.dim() == 4 and parsing.shape[1] == CONDITION_CHANNELS:
        cond = parsing.to(dtype)
    else:
        cond = parsing_condition(parsing, num_classes, dtype)
    return torch.cat([x, cond], dim=1)


@torch.no_grad()
def discriminator_forward(image_or_patch, parsing_or_patch, params, which="global", num_classes=8) -> float:
    kind = {"global": "disc-global", "local": "disc-local", "face": "disc-face"}[which]
    net = as_module(params, kind)
    net.eval()
    return float(net(discriminator_input(image_or_patch, parsing_or_patch, num_classes))[0])


# ------------------------------------------------------------- losses


def gan_losses(d_real, d_fake):
    """Discriminator loss -[log D(real) + log(1 - D(fake))] and non-saturating -log D(fake)."""
    d_real = torch.as_tensor(d_real, dtype=torch.float64) if not isinstance(d_real, torch.Tensor) else d_real
    d_fake = torch.as_tensor(d_fake, dtype=torch.float64) if not isinstance(d_fake, torch.Tensor) else d_fake
    d_real = d_real.clamp(PROB_EPS, 1 - PROB_EPS)
    d_fake = d_fake.clamp(PROB_EPS, 1 - PROB_EPS)
    d_loss = -(torch.log(d_real) + torch.log1p(-d_fake)).mean()
    g_loss = -torch.log(d_fake).mean()
    return d_loss, g_loss


def completion_loss(result, gt, condition, hole, perception, disc_global, disc_local=None,
                    config: CompletionLossConfig | None = None):
    """Weighted sum of perceptual, global and local adversarial terms.

    ``result`` and ``gt`` are N x 3 x H x W, ``condition`` the N x 3 x H x W
    repeated parsing map.  ``disc_local=None`` drops the local term.
    """
    config = config or CompletionLossConfig()
    l_p = perceptual_loss(gt, result, perception)
    _, l_g = gan_losses(torch.ones(1, dtype=result.dtype), disc_global(torch.cat([result, condition], 1)))
    parts = {"perceptual": l_p, "adv_global": l_g}
    total = config.lambda_p * l_p + config.lambda_g * l_g
    if disc_local is not None:
        r_patch, c_patch = crop_local(result, condition, hole, disc_local.config.input_size)
        _, l_l = gan_losses(torch.ones(1, dtype=result.dtype), disc_local(torch.cat([r_patch, c_patch], 1)))
        parts["adv_local"] = l_l
        total = total + config.lambda_l * l_l
    else:
        parts["adv_local"] = result.new_zeros(())
    return total, parts


# ------------------------------------------------------------- inference


def _run_generator(net, x, seed=None, dropout=False):
    was_training = net.training
    net.eval()
    set_dropout(net, dropout)
    try:
        with torch.no_grad(), torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            return net(x)
    finally:
        net.train(was_training)


def complete_forward(masked_image, parsing_map, mask, params, *, seed=None, dropout=False) -> np.ndarray:
    """Raw generator output (H x W x 3 in [-1, 1]) for a masked image."""
    net = as_module(params, "generator")
    x = generator_input(masked_image, parsing_map, mask, net.config.num_classes)
    return tensor_to_image(_run_generator(net, x, seed, dropout))


def infer_multi_hole(masked_image, parsing_map, mask, params, *, seed=None, dropout=False) -> np.ndarray:
    """Fill every hole with one generator pass and keep known pixels from the input."""
    masked_image = np.asarray(masked_image, dtype=np.float32)
    m = mask.mask if isinstance(mask, HoleMask) else np.asarray(mask)
    if not m.any():
        return masked_image.copy()
    raw = complete_forward(masked_image, parsing_map, m, params, seed=seed, dropout=dropout)
    return np.where(m[..., None] != 0, raw, masked_image)


# ------------------------------------------------------------- training


def train_completion(dataset, parsing_source=None, gen_config: GeneratorConfig | None = None,
                     perc_config: PerceptionConfig | None = None,
                     loss_config: CompletionLossConfig | None = None, epochs: int = 1, seed: int = 0,
                     data_config: DatasetConfig | None = None, *, lr: float = 2e-4,
                     betas=(0.5, 0.999), augmentation: bool = True, max_steps: int | None = None,
                     extrap_direction: str = "down", disc_channels: int = 16,
                     masks=None) -> Checkpoint:
    """Alternate one discriminator and one generator Adam update per sample (batch 1).

    ``parsing_source`` is ``None`` for ground-truth parsing or a frozen parsing
    checkpoint whose predictions condition the generator.  In extrapolation
    mode the hole is the fixed top/bottom strip and the local critic is not
    built.  Returns the generator checkpoint; the discriminators are attached
    as ``companions``.

    ``masks`` pins one hole mask per dataset entry (used for overfitting a
    fixed set); it requires ``augmentation=False``.
    """
    from .parsing import parse_forward

    dataset = list(dataset)
    if not dataset:
        raise ValidationError("train_completion needs a non-empty dataset")
    gen_config = gen_config or GeneratorConfig()
    loss_config = loss_config or CompletionLossConfig()
    size = dataset[0].size
    data_config = data_config or DatasetConfig(num_classes=gen_config.num_classes, image_size=size)
    if masks is not None:
        masks = list(masks)
        if len(masks) != len(dataset):
            raise ValidationError(f"{len(masks)} masks for {len(dataset)} samples")
        if augmentation:
            raise ValidationError("fixed masks need augmentation=False")
    extrap = gen_config.extrapolation_mode
    mask_mode = f"extrap-{extrap_direction}" if extrap else "train-random"
    C = gen_config.num_classes

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    G = Generator(gen_config)
    D_g = Discriminator(global_disc_config(size, base_channels=disc_channels))
    D_l = None if extrap else Discriminator(local_disc_config(size, base_channels=disc_channels))
    perception = PerceptionNet(perc_config)
    critics = [D_g] + ([D_l] if D_l is not None else [])
    opt_g = torch.optim.Adam(G.parameters(), lr=lr, betas=betas)
    opt_d = torch.optim.Adam([p for d in critics for p in d.parameters()], lr=lr, betas=betas)
    parser = None
    if parsing_source is not None:
        parser = as_module(parsing_source, "parsing")

    counts = {"generator_updates": 0, "global_d_updates": 0, "local_d_updates": 0}
    trace, step = [], 0
    G.train()
    for d in critics:
        d.train()
    for epoch in range(epochs):
        sums, n = {}, 0
        for idx in rng.permutation(len(dataset)):
            if max_steps is not None and step >= max_steps:
                break
            sample = dataset[idx]
            if augmentation:
                sample = augment(sample, rng, data_config)
            mask = masks[idx] if masks is not None else sample_hole_mask(sample, rng, mask_mode)
            masked = apply_mask(sample.image, mask, data_config.mean_pixel)
            labels = sample.labels if parser is None else parse_forward(masked, mask, parser).label_map
            hole = mask.holes[0]

            x = generator_input(masked, labels, mask, C)
            gt = image_to_tensor(sample.image)
            cond = x[:, 3:6]
            out = G(x)

            # discriminator update
            d_real, d_fake = D_g(torch.cat([gt, cond], 1)), D_g(torch.cat([out.detach(), cond], 1))
            d_loss, _ = gan_losses(d_real, d_fake)
            counts["global_d_updates"] += 1
            if D_l is not None:
                gt_p, c_p = crop_local(gt, cond, hole, D_l.config.input_size)
                out_p, _ = crop_local(out.detach(), cond, hole, D_l.config.input_size)
                dl_loss, _ = gan_losses(D_l(torch.cat([gt_p, c_p], 1)), D_l(torch.cat([out_p, c_p], 1)))
                d_loss = d_loss + dl_loss
                counts["local_d_updates"] += 1
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            # generator update
            total, parts = completion_loss(out, gt, cond, hole, perception, D_g, D_l, loss_config)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            counts["generator_updates"] += 1

            record = {k: float(v.detach()) for k, v in parts.items()}
            record.update(loss=total.item(), d_loss=d_loss.item())
            for k, v in record.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
            step += 1
        if n == 0:
            break
        trace.append({k: v / n for k, v in sums.items()})
        log.info("completion epoch %d: loss %.4f", epoch, trace[-1]["loss"])

    G.eval()
    meta = dict(counts, steps=step, seed=seed, mean_pixel=list(data_config.mean_pixel),
                mask_mode=mask_mode, lr=lr, loss_config=vars(loss_config),
                perception=vars(perception.config))
    ckpt = checkpoint_from_module(G, "generator", trace=trace, meta=meta, rng_state=capture_rng_state(rng))
    ckpt.companions["disc-global"] = checkpoint_from_module(D_g.eval(), "disc-global")
    if D_l is not None:
        ckpt.companions["disc-local"] = checkpoint_from_module(D_l.eval(), "disc-local")
    return ckpt
