import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portrait_completion.blend import BlendProblem, blend_residual, poisson_blend
from portrait_completion.errors import ConvergenceError, ShapeError


def dense_blend(source, target, mask):
    """Scalar-loop assembly of the clamped 5-point system, solved directly."""
    h, w = mask.shape
    pix = [(i, j) for i in range(h) for j in range(w) if mask[i, j]]
    index = {p: k for k, p in enumerate(pix)}
    n = len(pix)
    out = target.astype(np.float64).copy()
    for c in range(source.shape[2]):
        A = np.zeros((n, n))
        b = np.zeros(n)
        for k, (i, j) in enumerate(pix):
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, bb = i + di, j + dj
                if not (0 <= a < h and 0 <= bb < w):
                    continue
                A[k, k] += 1
                b[k] += source[i, j, c] - source[a, bb, c]
                if mask[a, bb]:
                    A[k, index[(a, bb)]] -= 1
                else:
                    b[k] += target[a, bb, c]
        u = np.linalg.solve(A, b)
        for k, (i, j) in enumerate(pix):
            out[i, j, c] = u[k]
    return out


def _problem(seed, h=12, w=14):
    r = np.random.default_rng(seed)
    src = r.uniform(-1, 1, (h, w, 3))
    tgt = r.uniform(-1, 1, (h, w, 3))
    mask = np.zeros((h, w), bool)
    mask[2:8, 3:11] = True
    mask[9:12, 0:4] = True  # touches the border
    return src, tgt, mask


def test_matches_direct_solve():
    src, tgt, mask = _problem(0)
    out = poisson_blend(BlendProblem(src, tgt, mask))
    assert np.allclose(out, dense_blend(src, tgt, mask), atol=1e-6)


def test_empty_mask_returns_target():
    src, tgt, _ = _problem(1)
    out = poisson_blend(BlendProblem(src, tgt, np.zeros(tgt.shape[:2])))
    assert np.array_equal(out, tgt)


def test_source_equal_target():
    _, tgt, mask = _problem(2)
    out = poisson_blend(BlendProblem(tgt, tgt, mask))
    assert np.allclose(out, tgt, atol=1e-12)


def test_constant_offset_recovers_target():
    _, tgt, mask = _problem(3)
    out = poisson_blend(BlendProblem(tgt + 0.37, tgt, mask))
    assert np.abs(out - tgt).max() <= 1e-5


def test_outside_mask_bit_exact():
    src, tgt, mask = _problem(4)
    tgt = tgt.astype(np.float32)
    out = poisson_blend(BlendProblem(src.astype(np.float32), tgt, mask))
    assert out.dtype == np.float32
    assert np.array_equal(out[~mask], tgt[~mask])


def test_residual_ratio_within_tolerance_64():
    r = np.random.default_rng(5)
    src, tgt = r.uniform(-1, 1, (2, 64, 64, 3))
    mask = np.zeros((64, 64), bool)
    mask[10:50, 5:40] = True
    p = BlendProblem(src, tgt, mask)
    out = poisson_blend(p)
    assert blend_residual(p, out) <= 1e-6


def test_single_channel_image():
    src, tgt, mask = _problem(6)
    out = poisson_blend(BlendProblem(src[..., 0], tgt[..., 0], mask))
    assert out.shape == mask.shape
    assert np.allclose(out, dense_blend(src[..., :1], tgt[..., :1], mask)[..., 0], atol=1e-6)


def test_full_mask_copies_source():
    src, tgt, _ = _problem(7)
    out = poisson_blend(BlendProblem(src, tgt, np.ones(tgt.shape[:2])))
    assert np.array_equal(out, src)


def test_non_convergence_reports_residual():
    src, tgt, mask = _problem(8, 32, 32)
    mask = np.zeros((32, 32), bool)
    mask[2:30, 2:30] = True
    with pytest.raises(ConvergenceError) as info:
        poisson_blend(BlendProblem(src, tgt, mask, max_iter=2))
    assert info.value.residual > 1e-6


def test_shape_errors():
    with pytest.raises(ShapeError):
        BlendProblem(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        BlendProblem(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((3, 4)))


def test_linear_source_obeys_maximum_principle():
    # interior mask: the guidance of a linear ramp vanishes, so u is harmonic
    h, w = 24, 24
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src = (0.03 * xx - 0.02 * yy)[..., None]
    tgt = np.random.default_rng(9).uniform(-1, 1, (h, w, 1))
    mask = np.zeros((h, w), bool)
    mask[5:19, 4:20] = True
    out = poisson_blend(BlendProblem(src, tgt, mask))
    ring = np.zeros_like(mask)
    ring[4:20, 3:21] = True
    ring &= ~mask
    lo, hi = tgt[ring].min(), tgt[ring].max()
    assert out[mask].min() >= lo - 1e-6 and out[mask].max() <= hi + 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(3, 10), st.integers(3, 10))
def test_random_masks_match_direct_solve(seed, h, w):
    r = np.random.default_rng(seed)
    src, tgt = r.uniform(-1, 1, (2, h, w, 2))
    mask = r.random((h, w)) < 0.5
    if mask.all():
        mask[0, 0] = False
    out = poisson_blend(BlendProblem(src, tgt, mask))
    assert np.array_equal(out[~mask], tgt[~mask])
    if mask.any():
        assert np.allclose(out, dense_blend(src, tgt, mask), atol=1e-5)
