import numpy as np
import torch


@torch.no_grad()
def central_diff(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn`` at ``x`` (double precision)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + eps
        hi = float(fn(x))
        flat[k] = orig - eps
        lo = float(fn(x))
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * eps)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).abs().max().item()
    den = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return num / den


def softmax_ce(scores: np.ndarray, target: np.ndarray, i: int, j: int) -> float:
    """Cross-entropy of one pixel, computed from scratch (C x H x W scores)."""
    z = scores[:, i, j].astype(np.float64)
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[target[i, j]])
