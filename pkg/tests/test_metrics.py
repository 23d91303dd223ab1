import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import hfen_oracle, psnr_oracle, ssim_oracle

from crnn_recon import metrics


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[:24, :20] / 20.0
    ref = np.stack([np.sin(3 * xx + t) * np.cos(2 * yy) + 1.5 for t in range(2)]).astype(complex)
    rec = ref + 0.05 * (rng.standard_normal(ref.shape) + 1j * rng.standard_normal(ref.shape))
    return rec, ref


def test_psnr_of_known_mse():
    assert metrics.psnr_from_mse(1e-3) == pytest.approx(30.0, abs=1e-12)
    ref = np.ones((4, 4))
    ref[0, 0] = 1.0
    rec = ref + np.sqrt(1e-3)
    # rec is brighter than ref but the peak comes from the reference
    assert metrics.psnr(rec, ref) == pytest.approx(30.0, abs=1e-9)


def test_psnr_identical_is_infinite():
    x = np.random.default_rng(1).random((3, 8, 8))
    assert metrics.psnr(x, x) == math.inf
    assert metrics.mse(x, x) == 0.0


def test_psnr_matches_oracle(pair):
    rec, ref = pair
    assert abs(metrics.psnr(rec, ref) - psnr_oracle(rec, ref)) < 1e-6


def test_ssim_identical_is_one(pair):
    _, ref = pair
    assert metrics.ssim(ref, ref) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_oracle(pair):
    rec, ref = pair
    assert abs(metrics.ssim(rec, ref) - ssim_oracle(rec, ref)) < 1e-6


def test_ssim_rejects_small_frames():
    with pytest.raises(ValueError, match="window"):
        metrics.ssim(np.ones((8, 8)), np.ones((8, 8)))


def test_hfen_identical_is_zero_and_matches_oracle(pair):
    rec, ref = pair
    assert metrics.hfen(ref, ref) == 0.0
    assert abs(metrics.hfen(rec, ref) - hfen_oracle(rec, ref)) < 1e-6


def test_hfen_ignores_constant_offset(pair):
    _, ref = pair
    mag = np.abs(ref)
    assert metrics.hfen(mag + 0.2, mag) < 1e-3


def test_hfen_rejects_flat_reference():
    with pytest.raises(ValueError, match="LoG"):
        metrics.hfen(np.ones((20, 20)) * 2, np.ones((20, 20)))


def test_log_kernel_sums_to_zero():
    k = metrics.log_kernel()
    assert k.shape == (15, 15)
    assert abs(k.sum()) < 1e-14
    np.testing.assert_allclose(k, k.T)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        metrics.mse(np.ones((4, 4)), np.ones((4, 5)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 0.5))
def test_metric_ranges(seed, noise):
    rng = np.random.default_rng(seed)
    ref = rng.random((12, 14)) + 0.1
    rec = ref + noise * rng.standard_normal(ref.shape)
    assert metrics.mse(rec, ref) >= 0
    assert -1 <= metrics.ssim(rec, ref) <= 1
    assert metrics.hfen(rec, ref) >= 0


def test_report_json(pair):
    rec, ref = pair
    report = metrics.evaluate_many([rec, ref], [ref, ref], metadata={"acceleration": 4}, workers=2)
    doc = json.loads(report.to_json())
    assert doc["metadata"]["acceleration"] == 4
    assert doc["per_sequence"][1]["psnr"] == "inf"
    assert set(doc["aggregate"]) == {"mse", "psnr", "ssim", "hfen"}
    serial = metrics.evaluate_many([rec, ref], [ref, ref])
    assert serial.per_sequence == report.per_sequence


class TestSimilarity:
    def test_basic(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, 1.0], [0.0, 0.0]])
        sim = metrics.cosine_similarity_matrix([a, b, 2 * a])
        np.testing.assert_allclose(sim.matrix, [[1, 0, 1], [0, 1, 0], [1, 0, 1]], atol=1e-12)

    def test_excludes_zero_maps(self):
        rng = np.random.default_rng(0)
        maps = [rng.random((3, 4)), np.zeros((3, 4)), rng.random((3, 4))]
        sim = metrics.cosine_similarity_matrix(maps)
        assert sim.matrix.shape == (2, 2)
        assert sim.excluded.tolist() == [1]

    def test_needs_two_maps(self):
        with pytest.raises(ValueError, match="at least 2"):
            metrics.cosine_similarity_matrix([np.ones(3), np.zeros(3)])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2 ** 31))
    def test_symmetric_bounded(self, n, seed):
        rng = np.random.default_rng(seed)
        m = metrics.cosine_similarity_matrix([rng.standard_normal((4, 5)) for _ in range(n)]).matrix
        np.testing.assert_array_equal(m, m.T)
        assert np.all(np.abs(m) <= 1) and np.all(np.diag(m) == 1)


def test_similarity_of_640_maps_matches_direct_loop():
    # 64 channels over 10 iterations, small spatial support
    rng = np.random.default_rng(4)
    maps = [np.maximum(rng.standard_normal((2, 3, 3)), 0) for _ in range(640)]
    maps[17] = np.zeros((2, 3, 3))
    sim = metrics.cosine_similarity_matrix(maps)
    kept = [m for i, m in enumerate(maps) if i != 17]
    worst = 0.0
    for i in range(0, len(kept), 37):
        for j in range(len(kept)):
            a, b = kept[i].ravel(), kept[j].ravel()
            direct = sum(x * y for x, y in zip(a, b)) / np.sqrt(sum(a * a) * sum(b * b))
            worst = max(worst, abs(sim.matrix[i, j] - direct))
    assert worst < 1e-6
    assert sim.matrix.shape == (639, 639)


def test_similarity_of_duplicated_maps_is_all_ones():
    m = np.random.default_rng(0).random((4, 4))
    np.testing.assert_allclose(metrics.cosine_similarity_matrix([m] * 5).matrix, np.ones((5, 5)))
