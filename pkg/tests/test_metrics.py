import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import sqrtm

from portrait_completion.errors import ShapeError, ValidationError
from portrait_completion.metrics import (
    PSNR_CAP,
    EvalReport,
    evaluate,
    frechet_distance,
    frechet_from_stats,
    l1_error,
    perception_features,
    psnr,
    read_report,
    ssim,
)
from portrait_completion.perception import PerceptionConfig, PerceptionNet


def _pair(seed, shape=(16, 16, 3)):
    r = np.random.default_rng(seed)
    return r.uniform(-1, 1, shape), r.uniform(-1, 1, shape)


# ---------------------------------------------------------------------- L1


def test_l1_basics():
    a, _ = _pair(0)
    assert l1_error(a, a) == 0.0
    assert l1_error(-np.ones((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(255.0)


def test_l1_scalar_loop_oracle():
    a, b = _pair(1, (4, 4, 3))
    total = 0.0
    for i in range(4):
        for j in range(4):
            for c in range(3):
                total += abs(a[i, j, c] - b[i, j, c]) * 127.5
    assert l1_error(a, b) == pytest.approx(total / 48, abs=1e-10)


def test_l1_region_oracle():
    a, b = _pair(2, (4, 4, 3))
    region = np.zeros((4, 4))
    region[1:3, 0] = 1
    expect = np.mean([abs(a[i, 0, c] - b[i, 0, c]) for i in (1, 2) for c in range(3)]) * 127.5
    assert l1_error(a, b, region) == pytest.approx(expect, abs=1e-10)


def test_l1_errors():
    a, b = _pair(3, (4, 4, 3))
    with pytest.raises(ValidationError):
        l1_error(a, b, np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        l1_error(a, b[:3])


# -------------------------------------------------------------------- PSNR


def test_psnr_cap_and_zero():
    a, _ = _pair(4)
    assert psnr(a, a) == PSNR_CAP
    # MSE equal to range^2 (range 2): constant difference of 2
    assert psnr(-np.ones((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_oracle():
    a, b = _pair(5, (8, 8, 3))
    mse = sum((a[i, j, c] - b[i, j, c]) ** 2 for i in range(8) for j in range(8) for c in range(3)) / 192
    assert psnr(a, b) == pytest.approx(10 * np.log10(4.0 / mse), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 0.9), st.floats(1e-4, 0.9))
def test_psnr_decreasing_in_mse(d1, d2):
    base = np.zeros((4, 4, 3))
    p1, p2 = psnr(base, base + d1), psnr(base, base + d2)
    if d1 * (1 + 1e-9) < d2:
        assert p1 > p2
    elif d2 * (1 + 1e-9) < d1:
        assert p1 < p2


# -------------------------------------------------------------------- SSIM


def ssim_oracle(a, b, L=2.0):
    """Windowed SSIM by explicit loops over every valid 11x11 window."""
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    h, w, C = a.shape
    vals = []
    for c in range(C):
        for i in range(h - 10):
            for j in range(w - 10):
                x = a[i:i + 11, j:j + 11, c]
                y = b[i:i + 11, j:j + 11, c]
                mx, my = (win * x).sum(), (win * y).sum()
                vx = (win * (x - mx) ** 2).sum()
                vy = (win * (y - my) ** 2).sum()
                cxy = (win * (x - mx) * (y - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identical():
    a, _ = _pair(6)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_windowed_oracle():
    a, b = _pair(7)
    b = 0.6 * a + 0.4 * b
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)


def test_ssim_structure_inversion_negative():
    checker = np.where(np.add.outer(np.arange(16), np.arange(16)) % 2, 0.5, -0.5)
    a = np.repeat(checker[..., None], 3, axis=2)
    assert ssim(a, -a) < 0


def test_ssim_symmetric():
    a, b = _pair(8)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))


def test_ssim_region_uses_window_centres():
    a, b = _pair(9, (20, 20, 3))
    region = np.zeros((20, 20))
    region[5:15, 5:15] = 1
    full = ssim(a, b)
    assert -1 <= ssim(a, b, region) <= 1
    everywhere = ssim(a, b, np.ones((20, 20)))
    assert everywhere == pytest.approx(full, abs=1e-12)
    with pytest.raises(ValidationError):
        corner = np.zeros((20, 20))
        corner[0, 0] = 1
        ssim(a, b, corner)


# ---------------------------------------------------------------- Frechet


def test_frechet_identical_sets():
    f = np.random.default_rng(10).normal(size=(64, 5))
    assert abs(frechet_distance(f, f)) < 1e-6


def test_frechet_1d_analytic():
    assert frechet_from_stats(np.zeros(1), np.ones((1, 1)), np.ones(1), np.ones((1, 1))) == pytest.approx(1.0)


def test_frechet_2d_closed_form():
    mu_a, mu_b = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    B = np.array([[1.0, -0.3], [-0.3, 0.5]])
    eps = 1e-6 * np.eye(2)
    Ae, Be = A + eps, B + eps
    expect = np.sum((mu_a - mu_b) ** 2) + np.trace(Ae + Be - 2 * np.real(sqrtm(Ae @ Be)))
    assert frechet_from_stats(mu_a, A, mu_b, B) == pytest.approx(expect, abs=1e-4)


def test_frechet_from_samples_uses_unbiased_covariance():
    r = np.random.default_rng(11)
    fa, fb = r.normal(size=(40, 3)), r.normal(1.0, 2.0, size=(50, 3))
    ca, cb = np.cov(fa.T, ddof=1), np.cov(fb.T, ddof=1)
    expect = frechet_from_stats(fa.mean(0), ca, fb.mean(0), cb)
    assert frechet_distance(fa, fb) == pytest.approx(expect, rel=1e-12)
    assert frechet_distance(fa, fb) == pytest.approx(frechet_distance(fb, fa), rel=1e-6)


def test_frechet_rejects_non_finite():
    f = np.ones((5, 2))
    f[2, 1] = np.nan
    with pytest.raises(ValidationError):
        frechet_distance(f, np.ones((5, 2)))


# ----------------------------------------------------------------- report


def test_report_aggregates_equal_mean_of_samples(tmp_path):
    r = np.random.default_rng(12)
    outs = [r.uniform(-1, 1, (16, 16, 3)) for _ in range(3)]
    tgts = [r.uniform(-1, 1, (16, 16, 3)) for _ in range(3)]
    masks = []
    for k in range(3):
        m = np.zeros((16, 16))
        m[4 + k:10, 3:12] = 1
        masks.append(m)
    rep = evaluate(outs, tgts, masks, ["a", "b", "c"],
                   PerceptionNet(PerceptionConfig(channels=(4, 4, 4, 4, 4))))
    agg = rep.aggregate()
    for region in ("entire", "hole"):
        for k, v in rep.per_sample[region].items():
            assert agg[region][k] == pytest.approx(float(np.mean(v)), abs=1e-12)
    assert rep.per_sample["hole"]["l1"][1] == pytest.approx(l1_error(outs[1], tgts[1], masks[1]))
    assert rep.fid is not None and np.isfinite(rep.fid)

    path = tmp_path / "report.txt"
    rep.write(path)
    parsed = read_report(path)
    assert parsed["count"] == 3
    assert parsed["hole.psnr"] == pytest.approx(agg["hole"]["psnr"], abs=1e-6)
    assert "sample.b.ssim" in parsed


def test_perception_features_shape():
    net = PerceptionNet(PerceptionConfig(channels=(4, 4, 4, 4, 6)))
    feats = perception_features([np.zeros((16, 16, 3))] * 3, net)
    assert feats.shape == (3, 6)


def test_empty_report():
    assert EvalReport().count == 0
