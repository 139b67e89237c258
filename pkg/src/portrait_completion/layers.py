"""Shared torch building blocks and array <-> tensor helpers."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ShapeError


NORMS = ("batch", "instance")


def norm_layer(kind, channels):
    """``batch``: BatchNorm with running statistics frozen at inference.
    ``instance``: per-image statistics at train and test time; identical to
    training-mode BatchNorm when the batch size is 1.
    """
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    raise ValueError(f"unknown norm {kind!r}; expected one of {NORMS}")


def conv_bn_relu(cin, cout, kernel=3, stride=1, dilation=1, norm="batch"):
    pad = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, dilation=dilation, bias=False),
        norm_layer(norm, cout),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    """Two stride-1 3x3 convolutions with an identity shortcut."""

    def __init__(self, channels, dilation=1, dropout=0.0, norm="batch"):
        super().__init__()
        pad = dilation
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=pad, dilation=dilation, bias=False),
            norm_layer(norm, channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=pad, dilation=dilation, bias=False),
            norm_layer(norm, channels),
        )
        self.relu = nn.ReLU(inplace=True)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else None

    def forward(self, x):
        out = self.relu(x + self.body(x))
        if self.dropout is not None:
            out = self.dropout(out)
        return out


def layer_plan(module: nn.Module) -> list[dict]:
    """Ordered description of every convolution in ``module`` (registration order)."""
    plan = []
    for name, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            plan.append(dict(
                name=name,
                kind="deconv" if isinstance(m, nn.ConvTranspose2d) else "conv",
                in_channels=m.in_channels,
                out_channels=m.out_channels,
                kernel=m.kernel_size[0],
                stride=m.stride[0],
                dilation=m.dilation[0],
                padding=m.padding[0],
            ))
    return plan


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array -> 1 x 3 x H x W tensor (tensors pass through)."""
    if isinstance(image, torch.Tensor):
        return image if image.dim() == 4 else image.unsqueeze(0)
    arr = np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1))
    return torch.from_numpy(arr).to(dtype).unsqueeze(0)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu()[0].permute(1, 2, 0).numpy().astype(np.float32)


def mask_to_tensor(mask, dtype=torch.float32) -> torch.Tensor:
    m = getattr(mask, "mask", mask)
    if isinstance(m, torch.Tensor):
        return m.to(dtype).reshape(1, 1, *m.shape[-2:])
    return torch.from_numpy(np.asarray(m, dtype=np.float32)).to(dtype)[None, None]


def parsing_condition(labels, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """Label map as one grayscale channel in [-1, 1], repeated to 3 channels."""
    if isinstance(labels, torch.Tensor):
        lab = labels.to(dtype)
    else:
        lab = torch.from_numpy(np.asarray(labels, dtype=np.float64)).to(dtype)
    lab = lab.reshape(-1, 1, *lab.shape[-2:])
    gray = 2.0 * lab / max(num_classes - 1, 1) - 1.0
    return gray.repeat(1, 3, 1, 1)


def check_divisible(h, w, factor, what):
    if h % factor or w % factor:
        raise ShapeError(f"{what} needs H and W divisible by {factor}, got {h}x{w}")


def plan_strided_paddings(size: int, n_layers: int) -> tuple[int, int]:
    """Paddings (stride-2 layers, final stride-1 layer) for a kernel-4 DCGAN stack.

    ``n_layers - 1`` stride-2 convolutions followed by one stride-1 convolution
    must reduce ``size`` to exactly 1.  At 256/128 this is the usual padding 1
    / 0; smaller inputs need padding 2 / 1.
    """
    for pad_s2 in (1, 2):
        for pad_last in (0, 1):
            n = size
            for _ in range(n_layers - 1):
                n = (n + 2 * pad_s2 - 4) // 2 + 1
                if n < 1:
                    break
            else:
                if n + 2 * pad_last - 4 + 1 == 1:
                    return pad_s2, pad_last
    raise ShapeError(f"no kernel-4 padding plan maps {size}px to 1x1 in {n_layers} layers")
