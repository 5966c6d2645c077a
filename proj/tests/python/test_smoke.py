"""Smoke tests for the python module: schedule math, diffusion steps, metrics
and the synthetic data generator."""

import math

import numpy as np
import pytest

import advrestore_py as ar


def test_linear_schedule_tables():
    s = ar.VarianceSchedule.linear(100, 1e-4, 0.02)
    assert s.n_steps == 100
    bars = np.asarray(s.alpha_bars)
    assert np.all(np.diff(bars) < 0)
    assert s.alpha_bar(0) == 1.0
    np.testing.assert_allclose(bars[0], 1 - 1e-4)


def test_q_sample_matches_numpy_formula():
    s = ar.VarianceSchedule.linear(50, 1e-3, 0.1)
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(4, 8, 8))
    xi = rng.normal(size=(4, 8, 8))
    r = 17
    got = ar.q_sample(z0, r, xi, s)
    bar = s.alpha_bar(r)
    want = math.sqrt(bar) * z0 + math.sqrt(1 - bar) * xi
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_ddim_inversion_recovers_z0():
    s = ar.VarianceSchedule.linear(40, 1e-3, 0.2)
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=(2, 4, 4))
    xi = rng.normal(size=(2, 4, 4))
    for r in (1, 7, 40):
        z_r = ar.q_sample(z0, r, xi, s)
        back = ar.ddim_step(xi, z_r, r, 0, sched=s)
        np.testing.assert_allclose(back, z0, atol=1e-9)


def test_sigma_boundary():
    s = ar.VarianceSchedule.linear(10, 1e-3, 0.3)
    assert ar.sigma(1, s) == 0.0
    assert ar.sigma_between(5, 0, s) == 0.0
    assert ar.sigma(5, s) > 0.0


def test_ddim_subsequence_contract():
    steps = ar.make_ddim_subsequence(1000, 8)
    assert len(steps) == 8
    assert steps[-1] == 1000
    assert all(b > a for a, b in zip(steps, steps[1:]))


def test_time_embed():
    e1 = ar.time_embed(3, 32)
    e2 = ar.time_embed(3, 32)
    np.testing.assert_array_equal(e1, e2)
    assert e1.shape == (32,)
    assert np.abs(ar.time_embed(4, 32) - e1).max() > 0


def test_metrics():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(16, 16))
    assert ar.psnr(a, a) == 99.0
    assert ar.ssim(a, a) == pytest.approx(1.0)
    b = a + 0.1
    assert ar.psnr(a, b) == pytest.approx(20.0)
    assert ar.ssim(a, b) == pytest.approx(ar.ssim(b, a))


def test_embedding_math():
    v = np.array([3.0, 4.0])
    np.testing.assert_allclose(ar.normalize_phi(v), [0.6, 0.8])
    assert ar.embedding_distance(v, v) == 0.0
    assert ar.embedding_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(2.0)
    assert ar.embedding_distance(np.array([1.0, 0.0]), np.array([-2.0, 0.0])) == pytest.approx(4.0)


def test_clip_budget_box():
    rng = np.random.default_rng(3)
    anchor = rng.uniform(size=(8, 8))
    y = anchor + rng.normal(scale=0.2, size=(8, 8))
    out = ar.clip_budget(y, anchor, 0.05)
    assert np.abs(out - anchor).max() <= 0.05 + 1e-12
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_generate_faces_and_degrade():
    hq, deg, ids = ar.generate_faces(seed=5, n_identities=3, n_variants=4)
    assert hq.shape == (12, 32, 32)
    assert deg.shape == (12, 32, 32)
    assert ids == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
    assert hq.min() >= 0.0 and hq.max() <= 1.0
    hq2, _, _ = ar.generate_faces(seed=5, n_identities=3, n_variants=4)
    np.testing.assert_array_equal(hq, hq2)
    # Degradation loses information but stays in range.
    d = ar.degrade(hq[0], blur_sigma=1.0, down_factor=4, noise_sigma=0.02, seed=9)
    assert d.shape == (1, 32, 32)
    assert ar.psnr(d, hq[0]) < 99.0


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(32, 32))
    path = str(tmp_path / "img.pgm")
    ar.save_pgm(path, img)
    back = ar.load_pgm(path)
    assert back.shape == (1, 32, 32)
    assert np.abs(back[0] - img).max() <= 1 / 255
