"""Image quality metrics and the evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.signal import fftconvolve

from .errors import ShapeError, ValidationError
from .layers import image_to_tensor
from .parsing import mean_iou  # noqa: F401  (re-exported; IoU lives with the parser)
from .perception import PerceptionNet

DATA_RANGE = 2.0  # images live in [-1, 1]
PSNR_CAP = 100.0  # reported for identical images
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
FRECHET_EPS = 1e-6
REGIONS = ("entire", "hole")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _region_select(diff, region):
    """Elements of ``diff`` (H x W [x C]) under the H x W region mask."""
    if region is None:
        return diff.ravel()
    m = np.asarray(getattr(region, "mask", region)).astype(bool)
    if m.shape != diff.shape[:2]:
        raise ShapeError(f"region {m.shape} does not match image {diff.shape}")
    if not m.any():
        raise ValidationError("metric region is empty")
    return diff[m].ravel()


def l1_error(a, b, region=None) -> float:
    """Mean |a - b| in 8-bit units (a [-1, 1] difference of 2 maps to 255)."""
    a, b = _pair(a, b)
    return float(np.mean(_region_select(np.abs(a - b), region)) * 255.0 / DATA_RANGE)


def psnr(a, b, region=None, data_range=DATA_RANGE) -> float:
    """10 log10(range^2 / MSE); identical inputs give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean(_region_select((a - b) ** 2, region)))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range=DATA_RANGE) -> np.ndarray:
    """Local SSIM at every fully-inside window position, one map per channel.

    Returns an array of shape (H - 10) x (W - 10) x C for the 11x11 window.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(x):
        return fftconvolve(x, win, mode="valid")

    maps = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return np.stack(maps, -1)


def ssim(a, b, region=None, data_range=DATA_RANGE) -> float:
    """Mean local SSIM; with ``region`` only windows centred inside it count."""
    smap = ssim_map(a, b, data_range)
    if region is None:
        return float(smap.mean())
    m = np.asarray(getattr(region, "mask", region)).astype(bool)
    half = SSIM_WINDOW // 2
    centres = m[half:m.shape[0] - half, half:m.shape[1] - half]
    if not centres.any():
        raise ValidationError("no SSIM window is centred inside the region")
    return float(smap[centres].mean())


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, eps=FRECHET_EPS) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^(1/2)) with A, B regularized by eps I.

    Tr((AB)^(1/2)) is taken as the sum of square roots of the eigenvalues of
    the symmetric matrix A^(1/2) B A^(1/2), which has the same spectrum.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    d = len(mu_a)
    cov_a = cov_a + eps * np.eye(d)
    cov_b = cov_b + eps * np.eye(d)
    w, v = np.linalg.eigh((cov_a + cov_a.T) / 2)
    sqrt_a = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    inner = sqrt_a @ cov_b @ sqrt_a
    ev = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(ev, 0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)


def feature_stats(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if not np.isfinite(f).all():
        raise ValidationError("features contain non-finite values")
    if len(f) < 2:
        raise ValidationError("need at least two feature vectors for a covariance")
    return f.mean(0), np.atleast_2d(np.cov(f, rowvar=False, ddof=1))


def frechet_distance(features_a, features_b, eps=FRECHET_EPS) -> float:
    """Frechet distance between Gaussians fitted to two N x D feature sets."""
    mu_a, cov_a = feature_stats(features_a)
    mu_b, cov_b = feature_stats(features_b)
    if len(mu_a) != len(mu_b):
        raise ShapeError(f"feature dims differ: {len(mu_a)} vs {len(mu_b)}")
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b, eps)


def perception_features(images, net: PerceptionNet | None = None) -> np.ndarray:
    """Global-average-pooled deepest-tap activations, one row per image."""
    net = net or PerceptionNet()
    rows = []
    with torch.no_grad():
        for img in images:
            feats = net(image_to_tensor(img))
            rows.append(feats[-1].mean(dim=(2, 3))[0].double().numpy())
    return np.stack(rows)


@dataclass
class EvalReport:
    """Per-sample metric values for each region plus one set-level FID."""

    per_sample: dict = field(default_factory=lambda: {r: {"l1": [], "psnr": [], "ssim": []} for r in REGIONS})
    fid: float | None = None
    sample_ids: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.sample_ids)

    def aggregate(self) -> dict:
        return {r: {k: float(np.mean(v)) for k, v in ms.items() if v} for r, ms in self.per_sample.items()}

    def add(self, sample_id, output, target, mask):
        self.sample_ids.append(str(sample_id))
        for region in REGIONS:
            reg = None if region == "entire" else mask
            if reg is not None and not np.asarray(getattr(reg, "mask", reg)).any():
                continue
            vals = self.per_sample[region]
            vals["l1"].append(l1_error(output, target, reg))
            vals["psnr"].append(psnr(output, target, reg))
            vals["ssim"].append(ssim(output, target, reg))

    def to_text(self) -> str:
        lines = [f"count={self.count}"]
        for region, ms in self.aggregate().items():
            for k, v in ms.items():
                lines.append(f"{region}.{k}={v:.6f}")
        if self.fid is not None:
            lines.append(f"fid={self.fid:.6f}")
        for i, sid in enumerate(self.sample_ids):
            for k, v in self.per_sample["entire"].items():
                lines.append(f"sample.{sid}.{k}={v[i]:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def read_report(path) -> dict:
    """key=value lines back into a flat dict of floats."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, v = line.split("=", 1)
                out[k] = float(v)
    return out


def evaluate(outputs, targets, masks, sample_ids=None, perception: PerceptionNet | None = None,
             with_fid: bool = True) -> EvalReport:
    outputs, targets, masks = list(outputs), list(targets), list(masks)
    if not (len(outputs) == len(targets) == len(masks)):
        raise ValidationError("outputs, targets and masks must have equal length")
    report = EvalReport()
    for i, (o, t, m) in enumerate(zip(outputs, targets, masks)):
        report.add(sample_ids[i] if sample_ids else i, o, t, m)
    if with_fid and len(outputs) >= 2:
        net = perception or PerceptionNet()
        report.fid = frechet_distance(perception_features(outputs, net), perception_features(targets, net))
    return report
