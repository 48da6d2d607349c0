import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from scout.errors import ParameterError
from scout.metrics import (
    QualityReport, disk_mask, psnr, radial_profile, ring_strength, rmse, ssim, volume_report,
)


def psnr_fixture():
    x = np.tile(np.linspace(0, 200, 64), (64, 1))
    return x, x + 10.0


def test_psnr_constant_offset():
    x, y = psnr_fixture()
    assert abs(psnr(x, y, 255.0) - 10 * math.log10(255.0**2 / 100.0)) < 1e-9
    assert abs(psnr(x, y, 255.0) - 28.1308) < 1e-3


def test_psnr_identical_is_inf():
    x, _ = psnr_fixture()
    assert psnr(x, x) == math.inf


def test_psnr_scale_invariant():
    x, y = psnr_fixture()
    assert abs(psnr(2 * x, 2 * y) - psnr(x, y)) < 1e-9


def test_psnr_monotone_in_noise(rng):
    x = rng.random((64, 64))
    vals = [np.mean([psnr(x, x + s * rng.standard_normal(x.shape), 1.0) for _ in range(20)])
            for s in (0.01, 0.02, 0.05)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_rmse_constant_offset(rng):
    x = rng.random((16, 16))
    assert rmse(x, x - 0.25) == pytest.approx(0.25, abs=1e-12)


def test_psnr_rejects_bad_max():
    with pytest.raises(ParameterError):
        psnr(np.zeros((4, 4)), np.ones((4, 4)))
    with pytest.raises(ParameterError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)), 1.0)


@given(st.integers(0, 2**31 - 1))
def test_rmse_axioms(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.standard_normal((3, 12, 12))
    assert rmse(a, a) == 0.0
    assert abs(rmse(a, b) - rmse(b, a)) < 1e-12
    # rmse is a scaled Euclidean distance, so the triangle inequality holds
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12
    two_pass = math.sqrt(sum((float(u) - float(v)) ** 2 for u, v in zip(a.ravel(), b.ravel())) / a.size)
    assert abs(rmse(a, b) - two_pass) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    r = np.random.default_rng(seed)
    a = ndimage_smooth(r.random((48, 40)))
    b = a + 0.05 * r.standard_normal(a.shape)
    L = float(a.max() - a.min())
    ref = structural_similarity(a, b, data_range=L, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert abs(ssim(a, b, L) - ref) < 1e-10


def ndimage_smooth(x):
    from scipy import ndimage
    return ndimage.gaussian_filter(x, 2.0)


def test_ssim_identity_and_symmetry(rng):
    a = rng.random((32, 32))
    b = a + 0.1 * rng.standard_normal((32, 32))
    assert ssim(a, a, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b, 1.0) == pytest.approx(ssim(b, a, 1.0), abs=1e-12)


def test_ssim_inverted_binary_is_low():
    x = (np.indices((64, 64)).sum(0) // 8 % 2).astype(float)
    assert ssim(x, 1 - x, 1.0) < 0.1


def test_ssim_small_shift_is_high():
    x = (np.indices((64, 64)).sum(0) // 8 % 2).astype(float)
    assert ssim(x, x + 0.001, 1.0) > 0.99


def test_ssim_rejects_tiny_and_3d():
    with pytest.raises(ParameterError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), 1.0)
    with pytest.raises(ParameterError):
        ssim(np.zeros((4, 16, 16)), np.zeros((4, 16, 16)), 1.0)


def test_volume_report_matches_loop(rng):
    a = rng.random((4, 24, 24))
    b = a + 0.05 * rng.standard_normal(a.shape)
    rep = volume_report(a, b)
    m, L = a.max(), a.max() - a.min()
    for z in range(4):
        assert rep.psnr[z] == pytest.approx(psnr(a[z], b[z], m))
        assert rep.ssim[z] == pytest.approx(ssim(a[z], b[z], L))
        assert rep.rmse[z] == pytest.approx(rmse(a[z], b[z]))
    assert rep.psnr_mean == pytest.approx(np.mean(rep.psnr))


def test_volume_report_identical(rng):
    a = rng.random((3, 16, 16))
    rep = volume_report(a, a)
    assert rep.rmse_mean == 0.0 and rep.ssim_mean == pytest.approx(1.0, abs=1e-12)
    assert rep.to_json()["psnr"]["mean"] == "identical"


def test_volume_report_single_corrupted_slice(rng):
    a = rng.random((5, 24, 24))
    b = a.copy()
    b[2] += 0.2 * rng.standard_normal((24, 24))
    rep = volume_report(a, b)
    assert math.isinf(rep.psnr[0]) and math.isfinite(rep.psnr[2])
    assert rep.psnr_mean == pytest.approx(rep.psnr[2])
    js = rep.to_json()
    assert js["identical_slices"] == 4
    assert js["slices"][0]["psnr"] == "identical"


def test_volume_report_mask(rng):
    a = rng.random((2, 32, 32))
    b = a.copy()
    b[:, 0, 0] += 5.0  # outside the disk
    mask = disk_mask((32, 32), 0.9)
    assert not mask[0, 0]
    rep = volume_report(a, b, mask=mask)
    assert all(math.isinf(p) for p in rep.psnr)


def test_report_save(tmp_path, rng):
    a = rng.random((3, 16, 16))
    rep = volume_report(a, a + 0.01, reference="ref", test_name="test")
    path = rep.save(tmp_path / "quality.json")
    js = json.loads(path.read_text())
    assert js["reference"] == "ref" and len(js["slices"]) == 3
    rows = path.with_suffix(".csv").read_text().strip().splitlines()
    assert rows[0] == "slice,psnr,ssim,rmse" and len(rows) == 4


def test_radial_profile_constant():
    _, prof = radial_profile(np.full((32, 32), 2.5))
    assert np.allclose(prof[np.isfinite(prof)], 2.5)


def test_ring_strength_detects_ring():
    n = 128
    y, x = np.indices((n, n)) - (n - 1) / 2
    r = np.hypot(y, x)
    base = np.exp(-r / 40)
    ringed = base + 0.05 * (np.abs(r - 30) < 1)
    s0 = ring_strength(base, 30)
    s1 = ring_strength(ringed, 30)
    assert s1 > 10 * s0
    with pytest.raises(ParameterError):
        ring_strength(base, 500)
