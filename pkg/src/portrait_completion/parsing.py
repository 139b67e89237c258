"""Stage-I structure recovery: joint parsing / pose network with one refinement pass."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, as_module, capture_rng_state, checkpoint_from_module
from .data import DatasetConfig, apply_mask, augment, make_pose_heatmaps, sample_hole_mask
from .errors import ShapeError, ValidationError
from .layers import ResBlock, check_divisible, conv_bn_relu, image_to_tensor, mask_to_tensor

log = logging.getLogger(__name__)


@dataclass
class ParsingNetConfig:
    num_classes: int = 8
    num_keypoints: int = 14
    in_channels: int = 4
    backbone_channels: tuple = (16, 32, 64, 128)
    backbone_stages_shared: int = 4
    stage5_channels: int = 128
    aspp_rates: tuple = (2, 4, 6)
    aspp_channels: int = 64
    pose_subnet_convs: int = 4
    pose_channels: int = 48
    refine_subnet_convs: int = 3
    refine_channels: int = 48
    alpha: float = 9.0
    pose_weight: float = 1.0
    heatmap_sigma: float = 3.0
    norm: str = "instance"

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")
        if any(r <= 0 for r in self.aspp_rates) or len(set(self.aspp_rates)) != len(self.aspp_rates):
            raise ValidationError("ASPP rates must be positive and distinct")
        if self.backbone_stages_shared != len(self.backbone_channels):
            raise ValidationError("every backbone stage in backbone_channels is shared by both subnets")

    @property
    def stride(self) -> int:
        return 2 ** min(3, len(self.backbone_channels))


@dataclass
class ParsingOutput:
    p0: torch.Tensor
    h: torch.Tensor
    p: torch.Tensor
    label_map: np.ndarray


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates, num_classes, norm="batch"):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn_relu(cin, cout, kernel=1, norm=norm)]
            + [conv_bn_relu(cin, cout, 3, dilation=r, norm=norm) for r in rates]
        )
        self.image_pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 2), cout, kernel=1, norm=norm)
        self.classify = nn.Conv2d(cout, num_classes, 1)

    def forward(self, x):
        pooled = self.image_pool(x).expand(-1, -1, x.shape[2], x.shape[3])
        out = torch.cat([b(x) for b in self.branches] + [pooled], dim=1)
        return self.classify(self.project(out))


def _head(cin, width, n_convs, cout, norm):
    layers, c = [], cin
    for _ in range(n_convs):
        layers.append(conv_bn_relu(c, width, norm=norm))
        c = width
    layers.append(nn.Conv2d(c, cout, 1))
    return nn.Sequential(*layers)


class ParsingNet(nn.Module):
    """Shared residual trunk -> (ASPP parsing subnet, pose subnet) -> refinement subnet."""

    config_class = ParsingNetConfig

    def __init__(self, config: ParsingNetConfig | None = None):
        super().__init__()
        self.config = cfg = config or ParsingNetConfig()
        norm = cfg.norm
        stages, cin, dilation = [], cfg.in_channels, 1
        for i, c in enumerate(cfg.backbone_channels):
            stride = 2 if i < 3 else 1
            if stride == 1:
                dilation *= 2
            stages.append(nn.Sequential(conv_bn_relu(cin, c, 3, stride=stride, dilation=dilation, norm=norm),
                                        ResBlock(c, dilation=dilation, norm=norm)))
            cin = c
        self.trunk = nn.Sequential(*stages)
        dilation *= 2
        self.stage5 = nn.Sequential(conv_bn_relu(cin, cfg.stage5_channels, 3, dilation=dilation, norm=norm),
                                    ResBlock(cfg.stage5_channels, dilation=dilation, norm=norm))
        self.aspp = ASPP(cfg.stage5_channels, cfg.aspp_channels, cfg.aspp_rates, cfg.num_classes, norm)
        self.pose = _head(cin, cfg.pose_channels, cfg.pose_subnet_convs, cfg.num_keypoints, norm)
        self.refine = _head(cin + cfg.num_classes + cfg.num_keypoints, cfg.refine_channels,
                            cfg.refine_subnet_convs, cfg.num_classes, norm)
        self.refine_passes = 0

    @property
    def stride(self) -> int:
        return self.config.stride

    def forward(self, x):
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"parsing net expects {self.config.in_channels} input channels, got {x.shape[1]}")
        check_divisible(x.shape[2], x.shape[3], self.stride, "parsing network")
        feats = self.trunk(x)
        p0 = self.aspp(self.stage5(feats))
        h = self.pose(feats)
        p = self.refine(torch.cat([feats, p0, h], dim=1))
        self.refine_passes += 1
        return p0, h, p


def _net_input(masked_image, mask):
    x = image_to_tensor(masked_image)
    m = mask_to_tensor(mask, x.dtype)
    if m.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"mask {tuple(m.shape[-2:])} and image {tuple(x.shape[-2:])} differ in size")
    return torch.cat([x, m], dim=1)


def upsample(scores, size):
    return F.interpolate(scores, size=size, mode="bilinear", align_corners=False)


@torch.no_grad()
def parse_forward(masked_image, mask, params) -> ParsingOutput:
    net = as_module(params, "parsing")
    was_training = net.training
    net.eval()
    x = _net_input(masked_image, mask)
    p0, h, p = net(x)
    net.train(was_training)
    label_map = upsample(p, x.shape[-2:]).argmax(dim=1)[0].numpy()
    return ParsingOutput(p0, h, p, label_map)


def _as_tensor(a, dtype=None):
    t = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a))
    return t.to(dtype) if dtype is not None else t


def spatial_weighted_loss(scores, target, mask, alpha: float = 9.0) -> torch.Tensor:
    """Mean over pixels of (alpha * m + 1) times the per-pixel softmax cross-entropy.

    ``scores`` is C x H x W (or N x C x H x W); ``target`` and ``mask`` are the
    matching H x W (or N x H x W) maps.  alpha = 0 gives the plain mean loss.
    """
    if alpha < 0:
        raise ValidationError("alpha must be non-negative")
    scores = _as_tensor(scores)
    if scores.dim() == 3:
        scores = scores.unsqueeze(0)
    target = _as_tensor(target).long().reshape(scores.shape[0], *scores.shape[2:])
    mask = _as_tensor(mask, scores.dtype).reshape(target.shape)
    if target.shape[-2:] != scores.shape[-2:]:
        raise ShapeError(f"scores {tuple(scores.shape)} and target {tuple(target.shape)} disagree")
    if target.min() < 0 or target.max() >= scores.shape[1]:
        raise ValidationError(f"target label outside [0, {scores.shape[1]})")
    ce = F.cross_entropy(scores, target, reduction="none")
    return ((alpha * mask + 1.0) * ce).mean()


def pose_loss(h_pred, h_gt) -> torch.Tensor:
    h_pred, h_gt = _as_tensor(h_pred), _as_tensor(h_gt)
    if h_pred.shape != h_gt.shape:
        raise ShapeError(f"heatmap shapes differ: {tuple(h_pred.shape)} vs {tuple(h_gt.shape)}")
    return ((h_pred - h_gt.to(h_pred.dtype)) ** 2).mean()


def mean_iou(pred_labels, gt_labels, region=None) -> float:
    """Mean IoU over classes present in prediction or ground truth (inside ``region``).

    Inputs of any matching shape are accepted, so stacking N maps gives the
    dataset-level score with intersections and unions pooled over samples.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if region is not None:
        sel = np.asarray(region).astype(bool)
        if sel.shape != gt.shape:
            raise ShapeError("region must match the label maps")
        if not sel.any():
            raise ValidationError("mean_iou over an empty region")
        pred, gt = pred[sel], gt[sel]
    pred, gt = pred.ravel(), gt.ravel()
    if gt.size == 0:
        raise ValidationError("mean_iou over an empty region")
    ious = []
    for c in np.union1d(np.unique(pred), np.unique(gt)):
        inter = np.count_nonzero((pred == c) & (gt == c))
        union = np.count_nonzero((pred == c) | (gt == c))
        ious.append(inter / union)
    return float(np.mean(ious))


def pose_targets(keypoints, image_size, config: ParsingNetConfig) -> np.ndarray:
    """Ground-truth heatmaps on the feature grid (sigma at least one cell)."""
    h, w = image_size
    s = config.stride
    kp = np.array(keypoints, dtype=np.float64).reshape(-1, 3)
    kp[:, :2] = (kp[:, :2] + 0.5) / s - 0.5
    sigma = max(config.heatmap_sigma * h / 256 / s, 1.0)
    return make_pose_heatmaps(kp, sigma, (h // s, w // s))


def parsing_step_loss(net: ParsingNet, sample, mask, mean_pixel):
    """Joint objective for one sample: weighted loss on p0 and p plus heatmap MSE."""
    cfg = net.config
    x = _net_input(apply_mask(sample.image, mask, mean_pixel), mask)
    p0, h, p = net(x)
    size = x.shape[-2:]
    target = torch.from_numpy(sample.labels).long()[None]
    m = torch.from_numpy(mask.mask.astype(np.float32))[None]
    l_p0 = spatial_weighted_loss(upsample(p0, size), target, m, cfg.alpha)
    l_p = spatial_weighted_loss(upsample(p, size), target, m, cfg.alpha)
    h_gt = torch.from_numpy(pose_targets(sample.keypoints, sample.size, cfg))[None]
    l_h = pose_loss(h, h_gt)
    total = l_p0 + l_p + cfg.pose_weight * l_h
    return total, {"parsing_initial": l_p0.item(), "parsing_refined": l_p.item(), "pose": l_h.item()}


def train_parsing(dataset, config: ParsingNetConfig | None = None, opt=None, epochs: int = 1,
                  seed: int = 0, data_config: DatasetConfig | None = None, *,
                  augmentation: bool = True, max_steps: int | None = None) -> Checkpoint:
    """SGD with momentum on the joint parsing objective, batch size 1.

    The per-epoch trace holds the mean total loss and its components.
    ``max_steps`` stops early (mid-epoch) after that many updates.
    ``opt["schedule"]`` is "constant" or "poly" (lr decays as (1 - t/T)^0.9
    over the planned number of updates).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("train_parsing needs a non-empty dataset")
    config = config or ParsingNetConfig()
    opt = {"lr": 1e-4, "momentum": 0.9, "schedule": "constant", **(opt or {})}
    if opt["schedule"] not in ("constant", "poly"):
        raise ValidationError(f"unknown lr schedule {opt['schedule']!r}")
    h, w = dataset[0].size
    data_config = data_config or DatasetConfig(num_classes=config.num_classes,
                                               num_keypoints=config.num_keypoints, image_size=(h, w))
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = ParsingNet(config)
    sgd = torch.optim.SGD(net.parameters(), lr=opt["lr"], momentum=opt["momentum"])
    sched = None
    if opt["schedule"] == "poly":
        total = epochs * len(dataset) if max_steps is None else min(max_steps, epochs * len(dataset))
        sched = torch.optim.lr_scheduler.PolynomialLR(sgd, total_iters=max(total, 1), power=0.9)
    net.train()

    trace, step = [], 0
    for epoch in range(epochs):
        sums, n = {}, 0
        for idx in rng.permutation(len(dataset)):
            if max_steps is not None and step >= max_steps:
                break
            sample = dataset[idx]
            if augmentation:
                sample = augment(sample, rng, data_config)
            mask = sample_hole_mask(sample, rng, "train-random")
            loss, parts = parsing_step_loss(net, sample, mask, data_config.mean_pixel)
            sgd.zero_grad()
            loss.backward()
            sgd.step()
            if sched is not None:
                sched.step()
            parts["loss"] = loss.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
            step += 1
        if n == 0:
            break
        trace.append({k: v / n for k, v in sums.items()})
        log.info("parsing epoch %d: loss %.4f", epoch, trace[-1]["loss"])

    net.eval()
    meta = {"mean_pixel": list(data_config.mean_pixel), "face_classes": list(data_config.face_classes),
            "steps": step, "seed": seed, "optimizer": opt}
    return checkpoint_from_module(net, "parsing", trace=trace, meta=meta,
                                  rng_state=capture_rng_state(rng))
