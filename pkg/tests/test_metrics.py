import numpy as np
import pytest

import jointfuse as jf
from jointfuse import SeededRng, q_abf, q_mi, ssim
from jointfuse.metrics import SSIM_C1, SSIM_C2, MetricReport, ssim_and_grad

from conftest import random_plane


def checkerboard(n):
    return (np.indices((n, n)).sum(axis=0) % 2).astype(np.float64)


def textured(seed, dims=(32, 32)):
    return random_plane(SeededRng(seed), dims, 0.05, 0.95)


# --- SSIM ------------------------------------------------------------------


def test_ssim_identity_is_exactly_one():
    x = textured(1)
    assert ssim(x, x) == 1.0


def test_ssim_anticorrelated_checkerboard():
    # closed form: means equal (luminance term 1), variances 0.25 each,
    # covariance -0.25, so cs = (-0.5 + C2) / (0.5 + C2)
    x = checkerboard(16)
    expected = (2.0 * (-0.25) + SSIM_C2) / (0.5 + SSIM_C2)
    assert ssim(x, 1.0 - x) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-0.996406468356957, abs=1e-14)


def test_ssim_constant_planes_luminance_only():
    # zero variances push the contrast/structure term to 1 via the C2 guard
    a, b = 0.3, 0.6
    expected = (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    value = ssim(np.full((8, 8), a), np.full((8, 8), b))
    assert value == pytest.approx(expected, abs=1e-12)


def test_ssim_symmetric():
    x, y = textured(2), textured(3)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)


def test_ssim_shift_invariance_for_mean_matched_pairs():
    # contrast/structure are shift invariant; when every local window mean
    # matches, the luminance term is identically 1 and a common shift
    # changes nothing. A period-2 alternating difference has zero mean in
    # every 8x8 window, so it preserves all local means.
    x = textured(4)
    alternating = 0.2 * (2.0 * checkerboard(32) - 1.0)
    y = x + alternating
    assert abs(ssim(x + 0.17, y + 0.17) - ssim(x, y)) < 1e-9


def test_ssim_dimension_checks():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_ssim_gradient_matches_finite_differences():
    rng = SeededRng(6)
    x = random_plane(rng, (10, 12), 0.1, 0.9)
    ref = random_plane(rng, (10, 12), 0.1, 0.9)
    value, grad = ssim_and_grad(x, ref)
    assert value == pytest.approx(ssim(x, ref), abs=1e-14)
    eps = 1e-6
    for idx in [(0, 0), (4, 7), (9, 11), (5, 0), (2, 3)]:
        x[idx] += eps
        up = ssim(x, ref)
        x[idx] -= 2 * eps
        down = ssim(x, ref)
        x[idx] += eps
        fd = (up - down) / (2 * eps)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


# --- Q_MI ------------------------------------------------------------------


def test_q_mi_identical_signals_score_two():
    x = textured(7)
    assert q_mi(x, x, x) == pytest.approx(2.0, abs=1e-12)


def test_q_mi_independent_noise_is_small():
    rng = SeededRng(8)
    a = random_plane(rng, (256, 256))
    b = random_plane(rng, (256, 256))
    f = random_plane(rng, (256, 256))
    assert q_mi(a, b, f) < 0.1


def test_q_mi_degenerate_constant_warns_and_returns_zero():
    flat = np.full((16, 16), 0.5)
    with pytest.warns(RuntimeWarning):
        assert q_mi(flat, flat, flat) == 0.0


def test_q_mi_symmetric_in_sources():
    a, b, f = textured(9), textured(10), textured(11)
    assert q_mi(a, b, f) == pytest.approx(q_mi(b, a, f), abs=1e-12)


def test_q_mi_prefers_related_fusion_over_noise():
    # statistical: q_mi(A,B,A) >= q_mi(A,B,N) in at least 18 of 20 trials
    wins = 0
    for trial in range(20):
        rng = SeededRng(1000 + trial)
        a = random_plane(rng, (64, 64))
        b = random_plane(rng, (64, 64))
        noise = random_plane(rng, (64, 64))
        wins += q_mi(a, b, a) >= q_mi(a, b, noise)
    assert wins >= 18


# --- Q^AB/F ----------------------------------------------------------------


def test_q_abf_perfect_fusion_of_identical_sources():
    x = textured(12)
    assert q_abf(x, x, x) >= 0.99


def test_q_abf_constant_fused_scores_near_zero():
    a, b = textured(13), textured(14)
    assert q_abf(a, b, np.full((32, 32), 0.5)) < 0.05


def test_q_abf_symmetric_in_sources():
    a, b, f = textured(15), textured(16), textured(17)
    assert q_abf(a, b, f) == pytest.approx(q_abf(b, a, f), abs=1e-12)


def test_q_abf_bounded_unit_interval():
    rng = SeededRng(18)
    for _ in range(10):
        a = random_plane(rng, (16, 16))
        b = random_plane(rng, (16, 16))
        f = random_plane(rng, (16, 16))
        value = q_abf(a, b, f)
        assert 0.0 <= value <= 1.0


def test_q_abf_all_flat_inputs_define_zero():
    flat = np.full((8, 8), 0.25)
    assert q_abf(flat, flat, flat) == 0.0


def test_metric_report_fields():
    a, b = textured(19), textured(20)
    report = MetricReport.compute(a, b, 0.5 * (a + b))
    assert np.isfinite(report.q_mi)
    assert 0.0 <= report.q_abf <= 1.0
    assert report.ssim <= 1.0


def test_engine_scores_regression_locked():
    # fixed synthetic fusion through the whole engine; values locked from
    # the first verified run, guarding against silent metric drift
    pair = jf.build_dataset(1, 32, "blur", "blur+down:s=2", sigma=0.05, seed=2024)[0]
    clean = jf.JointState(pair.clean1, pair.clean2,
                          np.maximum(pair.clean1, pair.clean2))
    den = jf.OracleDenoiser(clean, 0.5)
    fused = jf.run_fusion(pair.y1, pair.y2, pair.op1, pair.op2, den,
                          jf.FusionConfig(seed=7, sigma_y=0.05)).fused
    assert q_mi(pair.clean1, pair.clean2, fused) == pytest.approx(
        0.544149232910, abs=1e-9)
    assert q_abf(pair.clean1, pair.clean2, fused) == pytest.approx(
        0.202946554735, abs=1e-9)
    assert ssim(fused, pair.clean1) == pytest.approx(0.245279329337, abs=1e-9)
