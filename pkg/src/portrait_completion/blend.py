"""Gradient-domain compositing of generated content into the host image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import ConvergenceError, ShapeError, ValidationError

_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class BlendProblem:
    """source donates gradients inside ``mask``; target fixes every other pixel.

    The Laplacian stencil is clamped at the image border: neighbours that fall
    outside the image are dropped, so masks touching the border are allowed.
    """

    source: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    tol: float = 1e-6
    max_iter: int = 5000

    def __post_init__(self):
        self.source = np.asarray(self.source)
        self.target = np.asarray(self.target)
        self.mask = np.asarray(getattr(self.mask, "mask", self.mask)).astype(bool)
        if self.source.shape != self.target.shape:
            raise ShapeError(f"source {self.source.shape} and target {self.target.shape} differ")
        if self.source.ndim not in (2, 3) or self.mask.shape != self.target.shape[:2]:
            raise ShapeError(f"mask {self.mask.shape} does not match image {self.target.shape}")
        if not (self.tol > 0) or self.max_iter < 1:
            raise ValidationError("tol must be > 0 and max_iter >= 1")


@dataclass
class _System:
    matrix: sparse.csr_matrix
    rows: np.ndarray
    cols: np.ndarray
    # one (interior index, neighbour y, neighbour x) triple of arrays per stencil direction
    pairs: list
    boundary: list


def _assemble(mask) -> _System:
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    index = -np.ones((h, w), dtype=np.int64)
    index[rows, cols] = np.arange(len(rows))
    diag = np.zeros(len(rows))
    off_r, off_c, pairs, boundary = [], [], [], []
    for dy, dx in _OFFSETS:
        ny, nx = rows + dy, cols + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        p = np.nonzero(inside)[0]
        ny, nx = ny[inside], nx[inside]
        diag[p] += 1
        pairs.append((p, ny, nx))
        q = index[ny, nx]
        interior = q >= 0
        off_r.append(p[interior])
        off_c.append(q[interior])
        boundary.append((p[~interior], ny[~interior], nx[~interior]))
    n = len(rows)
    r = np.concatenate([np.arange(n)] + off_r)
    c = np.concatenate([np.arange(n)] + off_c)
    v = np.concatenate([diag] + [-np.ones(len(x)) for x in off_r])
    A = sparse.csr_matrix((v, (r, c)), shape=(n, n))
    return _System(A, rows, cols, pairs, boundary)


def _rhs(system: _System, source, target):
    n = len(system.rows)
    guidance = np.zeros(n)
    known = np.zeros(n)
    s_in = source[system.rows, system.cols]
    for p, ny, nx in system.pairs:
        np.add.at(guidance, p, s_in[p] - source[ny, nx])
    for p, ny, nx in system.boundary:
        np.add.at(known, p, target[ny, nx])
    return guidance, guidance + known


def blend_residual(problem: BlendProblem, output) -> float:
    """max over channels of ||L u - L source|| / ||L source|| on the mask interior.

    ||L source|| is floored at 1e-4 ||b|| (b the full right-hand side).
    """
    system = _assemble(problem.mask)
    out = np.asarray(output, dtype=np.float64)
    src = problem.source.astype(np.float64)
    tgt = problem.target.astype(np.float64)
    if out.ndim == 2:
        out, src, tgt = out[..., None], src[..., None], tgt[..., None]
    worst = 0.0
    for ch in range(out.shape[-1]):
        guidance, b = _rhs(system, src[..., ch], tgt[..., ch])
        r = b - system.matrix @ out[system.rows, system.cols, ch]
        worst = max(worst, _ratio(r, guidance, b))
    return worst


# CG aims this far below the requested ratio; the error of the solution itself
# is the residual amplified by the conditioning of the Laplacian
_SOLVE_MARGIN = 1e-3

# floor on the residual scale relative to ||b||: a (near) zero guidance field,
# e.g. a linear source on an interior mask, would otherwise ask for an exact solve
_SCALE_FLOOR = 1e-4


def _scale(guidance, b):
    return max(np.linalg.norm(guidance), _SCALE_FLOOR * np.linalg.norm(b))


def _ratio(r, guidance, b):
    norm = np.linalg.norm(r)
    scale = _scale(guidance, b)
    return 0.0 if norm == 0 else float(norm / scale) if scale > 0 else float("inf")


def poisson_blend(problem: BlendProblem) -> np.ndarray:
    """Solve Lu = L(source) inside the mask with u = target outside, channel by channel.

    Uses Jacobi-preconditioned conjugate gradients.  Pixels outside the mask
    are copied from ``target`` untouched.  Raises ConvergenceError (with the
    final residual ratio) if ``max_iter`` is not enough.
    """
    target = problem.target
    out = target.copy()
    if not problem.mask.any():
        return out
    if problem.mask.all():
        # no Dirichlet boundary: the guidance field only fixes u up to a constant
        return problem.source.astype(target.dtype, copy=True)

    system = _assemble(problem.mask)
    A = system.matrix
    inv_diag = 1.0 / A.diagonal()
    M = splinalg.LinearOperator(A.shape, matvec=lambda x: inv_diag * x, dtype=np.float64)

    src = problem.source.astype(np.float64)
    tgt = target.astype(np.float64)
    two_d = src.ndim == 2
    if two_d:
        src, tgt = src[..., None], tgt[..., None]
    view = out[..., None] if two_d else out
    for ch in range(src.shape[-1]):
        guidance, b = _rhs(system, src[..., ch], tgt[..., ch])
        scale = _scale(guidance, b)
        x0 = src[system.rows, system.cols, ch]
        if scale == 0:
            u = np.zeros_like(b)
        else:
            u, _ = splinalg.cg(A, b, x0=x0, rtol=0.0, atol=_SOLVE_MARGIN * problem.tol * scale,
                               maxiter=problem.max_iter, M=M)
        ratio = _ratio(b - A @ u, guidance, b)
        if ratio > problem.tol:
            raise ConvergenceError(
                f"conjugate gradients did not reach tol {problem.tol:g} in {problem.max_iter} iterations",
                ratio)
        view[system.rows, system.cols, ch] = u.astype(out.dtype)
    return out
