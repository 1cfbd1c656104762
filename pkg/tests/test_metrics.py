import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.optimize import linprog
from skimage.metrics import structural_similarity

from pidiff.metrics import (
    PSNR_CAP,
    CostModel,
    MetricReport,
    emd_1d,
    gaussian_window,
    macs_count,
    macs_total,
    psnr,
    psnr_flagged,
    ssim,
)
from pidiff.tensor import Conv2d, Linear, Module, Parameter, Sequential, Tensor, ops


# -- PSNR --------------------------------------------------------------------------------

def test_psnr_examples(rng):
    a = rng.random((16, 16))
    assert psnr_flagged(a, a) == (PSNR_CAP, True)
    b = a + 0.1  # MSE 0.01
    assert psnr(a, b, data_range=1.0) == pytest.approx(20.0, abs=1e-9)
    assert psnr_flagged(a, b, 1.0)[1] is False
    with pytest.raises(ValueError):
        psnr(a, a[:8])
    with pytest.raises(ValueError):
        psnr(a, b, data_range=0.0)


def test_psnr_monotone_in_mse(rng):
    base = rng.uniform(-1, 1, (12, 12))
    pairs = [(base, base + rng.normal(0, s, base.shape)) for s in rng.uniform(1e-3, 0.5, 20)]
    mse = np.array([np.mean((a - b) ** 2) for a, b in pairs])
    values = np.array([psnr(a, b) for a, b in pairs])
    order = np.argsort(mse)
    assert np.all(np.diff(values[order]) < 0)


def psnr_scalar(a, b, r):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (float(x) - float(y)) ** 2
    return 10.0 * np.log10(r * r / (total / a.size))


# -- SSIM --------------------------------------------------------------------------------

def ssim_loop(a, b, r=2.0, size=11, sigma=1.5):
    """Window-by-window reimplementation with explicit weighted moments."""
    x = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (0.01 * r) ** 2, (0.03 * r) ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity(rng):
    x = rng.uniform(-1, 1, (24, 20))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_and_psnr_match_independent_implementations(rng):
    for _ in range(5):
        a = rng.uniform(-1, 1, (16, 18))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), -1, 1)
        assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-9)
        assert psnr(a, b) == pytest.approx(psnr_scalar(a, b, 2.0), abs=1e-9)


def test_ssim_matches_skimage(rng):
    a = rng.uniform(-1, 1, (32, 32))
    b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
    ref = structural_similarity(a, b, data_range=2.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_ordering_and_affine_invariance(rng):
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    x = np.sin(6 * xx) * np.cos(4 * yy) * 0.5 + 0.5
    noisy = x + rng.normal(0, 1e-3, x.shape)
    assert ssim(x, 1 - x, 1.0) < ssim(x, noisy, 1.0)
    y = x + rng.normal(0, 0.05, x.shape)
    # means, variances and both constants scale together; an offset would move the luminance term
    assert ssim(3.0 * x, 3.0 * y, 3.0) == pytest.approx(ssim(x, y, 1.0), abs=1e-12)


def test_ssim_errors():
    with pytest.raises(ValueError, match="smaller"):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 12, 3)))


@given(hnp.arrays(np.float64, (11, 13), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (11, 13), elements=st.floats(-1, 1)))
def test_ssim_range(a, b):
    v = ssim(a, b)
    assert -1 - 1e-12 <= v <= 1 + 1e-12


def test_gaussian_window():
    g = gaussian_window()
    assert g.shape == (11,) and g.sum() == pytest.approx(1.0, rel=1e-15) and g.argmax() == 5


# -- EMD ---------------------------------------------------------------------------------

def emd_lp(p, q):
    """Transport linear program with uniform masses and |x - y| cost."""
    n, m = len(p), len(q)
    cost = np.abs(np.subtract.outer(p, q)).ravel()
    rows = []
    for i in range(n):
        r = np.zeros((n, m))
        r[i] = 1
        rows.append(r.ravel())
    for j in range(m):
        r = np.zeros((n, m))
        r[:, j] = 1
        rows.append(r.ravel())
    rhs = np.concatenate([np.full(n, 1 / n), np.full(m, 1 / m)])
    res = linprog(cost, A_eq=np.array(rows), b_eq=rhs, bounds=(0, None), method="highs")
    assert res.success
    return res.fun


def test_emd_examples():
    assert emd_1d([0.3, 0.1, 0.9], [0.9, 0.3, 0.1]) == 0.0
    assert emd_1d([0.0], [1.0]) == 1.0
    with pytest.raises(ValueError):
        emd_1d([], [1.0])


@pytest.mark.parametrize("m", [10, 7])
def test_emd_matches_linear_program(m):
    rng = np.random.default_rng(m)
    for _ in range(5):
        p, q = rng.normal(0, 1, 10), rng.normal(0.5, 2, m)
        assert emd_1d(p, q) == pytest.approx(emd_lp(p, q), abs=1e-9)


def test_emd_equal_sizes_is_sorted_difference(rng):
    p, q = rng.random(50), rng.random(50) * 3
    assert emd_1d(p, q) == pytest.approx(np.mean(np.abs(np.sort(p) - np.sort(q))), rel=1e-12)


samples = hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-100, 100))


@given(samples, samples, samples)
def test_emd_is_a_metric(p, q, r):
    assert emd_1d(p, q) >= 0
    assert emd_1d(p, q) == pytest.approx(emd_1d(q, p), rel=1e-12, abs=1e-12)
    assert emd_1d(p, r) <= emd_1d(p, q) + emd_1d(q, r) + 1e-9


# -- report ------------------------------------------------------------------------------

def test_metric_report(rng):
    rep = MetricReport()
    a = rng.uniform(-1, 1, (12, 12))
    rep.add("self", a, a)
    rep.add("noisy", a, np.clip(a + 0.1, -1, 1))
    agg = rep.aggregate()
    assert agg["capped"] == 1 and rep.ssim[0] == pytest.approx(1.0, abs=1e-9)
    table = rep.to_table().splitlines()
    assert table[1].endswith("capped") and table[-1].startswith("mean")
    csv = rep.to_csv().splitlines()
    assert csv[0] == "image,psnr_db,ssim,capped" and csv[1].startswith("self,99.0,")
    assert csv[-2].startswith("mean,")


# -- cost model ----------------------------------------------------------------------------

REFERENCE_COST = CostModel(439.34, 114.43, 927.62)


def test_reference_totals_exact():
    assert REFERENCE_COST.total(20) == 3655.56
    assert macs_total(REFERENCE_COST, 200) == 24252.96
    assert REFERENCE_COST.total(0) == pytest.approx(439.34 + 927.62, abs=1e-12)
    with pytest.raises(ValueError):
        REFERENCE_COST.total(-1)


def test_published_step_totals_are_affine():
    published = {2: 1595.82, 4: 1824.68, 5: 1939.11, 10: 2511.26, 20: 3655.56, 50: 7088.46, 100: 12809.96}
    for s, v in published.items():
        assert REFERENCE_COST.total(s) == v
    steps = np.array(sorted(published))
    totals = np.array([REFERENCE_COST.total(int(s)) for s in steps])
    slopes = np.diff(totals) / np.diff(steps)
    np.testing.assert_allclose(slopes, 114.43, rtol=1e-12)


def test_cost_table():
    lines = REFERENCE_COST.table([20, 200]).splitlines()
    assert lines == ["s\ttotal_GMACs", "20\t3655.56", "200\t24252.96"]


def test_conv_and_linear_mac_formulas(rng):
    conv = Conv2d(3, 5, 3, rng)
    assert macs_count(conv, Tensor(rng.random((1, 3, 8, 10)))) == 5 * 3 * 9 * 8 * 10
    strided = Conv2d(3, 4, 3, rng, stride=2)
    assert macs_count(strided, Tensor(rng.random((1, 3, 8, 8)))) == 4 * 3 * 9 * 4 * 4
    lin = Linear(6, 7, rng)
    assert macs_count(lin, Tensor(rng.random((1, 6)))) == 42
    net = Sequential(Conv2d(1, 2, 3, rng), Conv2d(2, 2, 1, rng))
    assert macs_count(net, Tensor(rng.random((1, 1, 4, 4)))) == 2 * 9 * 16 + 2 * 2 * 16


class _Unsupported(Module):
    def __init__(self):
        self.w = Parameter(np.ones(3))

    def forward(self, x):
        return ops.mul(x, self.w)


def test_unsupported_layer_is_rejected():
    with pytest.raises(TypeError, match="_Unsupported"):
        macs_count(_Unsupported(), Tensor(np.ones(3)))
