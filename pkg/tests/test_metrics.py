import math

import numpy as np
import pytest

from cmdiff.metrics import (
    MetricReport,
    channel_histograms,
    evaluate_pairs,
    fid_from_features,
    histogram_distance,
    patch_features,
    psnr,
    read_features,
    read_report,
    ssim,
    write_features,
)


def test_psnr_cases():
    a = np.random.default_rng(0).integers(0, 200, (16, 16), dtype=np.uint8)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 16) == pytest.approx(10 * math.log10(255**2 / 256), abs=1e-9)
    assert psnr(a, a + 16) == pytest.approx(24.0486, abs=1e-3)
    b = np.zeros((16, 16), dtype=np.uint8)
    c = b.copy()
    c[3, 7] = 255
    assert psnr(b, c) == pytest.approx(24.0824, abs=1e-3)
    with pytest.raises(ValueError):
        psnr(a, a[:8])


def ssim_oracle(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    n = a.size
    ma, mb = sum(a) / n, sum(b) / n
    va = sum((x - ma) ** 2 for x in a) / n
    vb = sum((x - mb) ** 2 for x in b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))


def test_ssim_cases():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    assert ssim(a, a) == 1.0
    assert ssim(a, a, "global") == 1.0
    assert ssim(a, 255 - a) < 1.0
    x = np.array([[10, 200], [35, 90]])
    y = np.array([[12, 180], [60, 95]])
    assert ssim(x, y, "global") == pytest.approx(ssim_oracle(x, y), abs=1e-12)
    with pytest.raises(ValueError):
        ssim(x, y)  # smaller than 11x11
    with pytest.raises(ValueError):
        ssim(a, a, "box")


def test_ssim_window_average_of_local_formula():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 256, (12, 13), dtype=np.uint8).astype(float)
    b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(2):
        for j in range(3):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * pa * pa).sum() - ma**2, (w * pb * pb).sum() - mb**2
            cov = (w * pa * pb).sum() - ma * mb
            c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-10)


def test_fid_one_dimensional_cases():
    z = np.array([-1.0, 1.0])  # mean 0, unbiased variance 2 -> scale to 1
    unit = z / np.sqrt(2)
    assert fid_from_features(unit[:, None], (unit + 1)[:, None]) == pytest.approx(1.0, abs=1e-8)
    assert fid_from_features(unit[:, None], (2 * unit)[:, None]) == pytest.approx(1.0, abs=1e-8)
    f = np.random.default_rng(3).standard_normal((50, 4))
    assert fid_from_features(f, f) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError):
        fid_from_features(f, f[:, :3])
    with pytest.raises(ValueError):
        fid_from_features(f[:1], f)


def test_fid_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(4)
    a = rng.standard_normal((40, 3))
    b = rng.standard_normal((40, 3)) @ np.array([[1, 0.3, 0], [0, 1, 0.5], [0, 0, 2]]) + 0.4
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb - 2 * np.real(sqrtm(ca @ cb)))
    assert fid_from_features(a, b) == pytest.approx(ref, rel=1e-8)


def test_histogram_distances():
    p = np.array([0.2, 0.3, 0.5])
    for m in ("chi2", "euclidean", "bhattacharyya"):
        assert histogram_distance(p, p, m) == pytest.approx(0.0, abs=1e-12)
    assert histogram_distance([1, 0], [0, 1], "bhattacharyya") == math.inf
    assert histogram_distance([0.5, 0.5], [0.25, 0.75], "chi2") == pytest.approx(0.133333, abs=1e-6)
    assert histogram_distance([0.5, 0.5], [0.25, 0.75], "euclidean") == pytest.approx(0.125)
    with pytest.raises(ValueError):
        histogram_distance(p, p[:2])
    with pytest.raises(ValueError):
        histogram_distance(p, p, "kl")


def test_channel_histograms_and_features(tmp_path):
    img = np.random.default_rng(5).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    h = channel_histograms(img, 32)
    assert h.shape == (3, 32)
    np.testing.assert_allclose(h.sum(axis=1), 1.0)
    f = np.array([patch_features(img), patch_features(255 - img)])
    assert f.shape == (2, 64)
    write_features(tmp_path / "f.csv", f)
    np.testing.assert_array_equal(read_features(tmp_path / "f.csv"), f)


def test_report_csv(tmp_path):
    rng = np.random.default_rng(6)
    a = rng.integers(0, 256, (3, 16, 16, 3), dtype=np.uint8)
    b = a.copy()
    b[1] = 255 - b[1]
    rep = evaluate_pairs(["x", "y", "z"], list(a), list(b), bins=8)
    assert rep.infinite_psnr_count == 2 and math.isfinite(rep.mean_psnr)
    rep.notes.append("FID omitted")
    rep.write_csv(tmp_path / "m.csv")
    rows = read_report(tmp_path / "m.csv")
    assert rows[0] == ["sample_id", "psnr_db", "ssim"]
    assert rows[1][1] == "inf" and rows[4][0] == "mean"
    assert any(r[0] == "note" for r in rows)
    assert isinstance(MetricReport().mean_ssim, float)
