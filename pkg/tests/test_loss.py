import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualsplat.errors import ContractViolation
from dualsplat.loss import (SSIM_C1, SSIM_C2, baseline_loss, d_ssim, ensemble_total_loss,
                            normalize_uncertainty_for_viz, register_perceptual_loss, ssim, total_loss,
                            uncertainty_l1, uncertainty_map, variance_loss)

from oracles import central_difference, ssim_direct

unit = st.floats(0.0, 1.0, allow_nan=False)


def img(shape=(4, 4, 3)):
    return arrays(np.float64, shape, elements=unit)


class TestUncertaintyMap:
    def test_examples(self):
        a = np.full((2, 2, 3), 0.7)
        b = np.full((2, 2, 3), 0.3)
        np.testing.assert_allclose(uncertainty_map(a, b), 0.4, atol=1e-15)
        assert (uncertainty_map(a, a) == 0).all()

    @given(img(), img())
    def test_symmetric_nonnegative(self, a, b):
        u = uncertainty_map(a, b)
        np.testing.assert_array_equal(u, uncertainty_map(b, a))
        assert (u >= 0).all()
        assert (u == 0).all() == np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            uncertainty_map(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestUncertaintyL1:
    def test_single_entry(self):
        loss, _, _ = uncertainty_l1(np.array([0.0]), np.array([0.5]), np.array([0.2]), 5.0)
        assert loss == pytest.approx(1.183940, abs=1e-6)
        assert loss == pytest.approx(0.5 * math.exp(-1) + 1.0, abs=1e-15)

    @given(img(), img(), img())
    def test_zero_u_is_l1(self, gt, pred, u):
        loss, _, _ = uncertainty_l1(gt, pred, np.zeros_like(u), 5.0)
        assert loss == np.mean(np.abs(pred - gt))
        loss0, _, _ = uncertainty_l1(gt, pred, u, 0.0)
        assert loss0 == np.mean(np.abs(pred - gt))

    def test_perfect_prediction(self):
        x = np.random.default_rng(0).uniform(size=(3, 3, 3))
        assert uncertainty_l1(x, x, np.zeros_like(x), 5.0)[0] == 0.0

    def test_negative_lambda(self):
        with pytest.raises(ContractViolation):
            uncertainty_l1(np.zeros(1), np.zeros(1), np.zeros(1), -1.0)

    @given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.1, 10))
    def test_weight_decreasing_in_u(self, u1, du, lam):
        # per-entry gradient magnitude w.r.t. pred is the supervision weight
        _, g1, _ = uncertainty_l1(np.zeros(1), np.ones(1), np.array([u1]), lam)
        _, g2, _ = uncertainty_l1(np.zeros(1), np.ones(1), np.array([u1 + du + 1e-3]), lam)
        assert g2[0] < g1[0]

    @given(st.floats(1.01, 50), st.floats(0.5, 10))
    def test_u_gradient_vanishes_at_optimum(self, r, lam):
        u_star = math.log(r) / lam
        _, _, gu = uncertainty_l1(np.zeros(1), np.array([r]), np.array([u_star]), lam)
        assert gu[0] == pytest.approx(0.0, abs=1e-12)

    def test_gradients_fd(self):
        rng = np.random.default_rng(3)
        gt, pred, u = rng.uniform(size=(3, 4, 4, 3))
        _, gp, gu = uncertainty_l1(gt, pred, u, 5.0)
        np.testing.assert_allclose(gp, central_difference(lambda: uncertainty_l1(gt, pred, u, 5.0)[0], pred),
                                   rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(gu, central_difference(lambda: uncertainty_l1(gt, pred, u, 5.0)[0], u),
                                   rtol=1e-6, atol=1e-10)


class TestSSIM:
    def test_self(self):
        a = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_direct_windows(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(2, 14, 17, 3))
        assert ssim(a, b) == pytest.approx(ssim_direct(a, b), abs=1e-12)

    def test_constant_images_closed_form(self):
        # a = 0, b = 1: mu_a = var_a = cov = 0 and e_bb = mu_b = m, where m is the
        # window mass inside the image (product of the two 1-D partial sums)
        h = w = 20
        x = np.arange(11) - 5
        g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
        g /= g.sum()

        def mass(n, i):
            return sum(g[k + 5] for k in range(-5, 6) if 0 <= i + k < n)

        vals = []
        for i in range(h):
            for j in range(w):
                m = mass(h, i) * mass(w, j)
                vals.append(SSIM_C1 * SSIM_C2 / ((m * m + SSIM_C1) * (m - m * m + SSIM_C2)))
        got = ssim(np.zeros((h, w, 3)), np.ones((h, w, 3)))
        assert got == pytest.approx(np.mean(vals), rel=1e-10)
        assert got < 0.01

    def test_gradient_fd(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(2, 16, 16, 3))
        _, g = ssim(a, b, return_grad=True)
        fd = central_difference(lambda: ssim(a, b), b)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
        assert rel.max() < 1e-4

    def test_grayscale(self):
        rng = np.random.default_rng(5)
        a, b = rng.uniform(size=(2, 12, 12))
        v, g = ssim(a, b, return_grad=True)
        assert g.shape == (12, 12)
        assert v == pytest.approx(ssim_direct(a, b), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ContractViolation):
            ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))

    @given(img((11, 11, 1)), img((11, 11, 1)))
    @settings(max_examples=30)
    def test_range(self, a, b):
        assert -1.0 - 1e-12 <= ssim(a, b) <= 1.0 + 1e-12


class TestDSSIM:
    def test_examples(self):
        rng = np.random.default_rng(6)
        gt, p = rng.uniform(size=(2, 12, 12, 3))
        assert d_ssim(gt, gt, gt) == pytest.approx(0.0, abs=1e-12)
        assert d_ssim(gt, p, gt) == pytest.approx(1 - ssim(gt, p), abs=1e-12)

    @given(img((11, 11, 3)), img((11, 11, 3)), img((11, 11, 3)))
    @settings(max_examples=20)
    def test_range(self, gt, a, b):
        assert 0 - 1e-12 <= d_ssim(gt, a, b) <= 4 + 1e-12


def _composition(br, lam_s, lam_l):
    return (1 - lam_s) * (br.l1_u_model1 + br.l1_u_model2) + lam_s * br.d_ssim + lam_l * br.lpips


class TestTotalLoss:
    def test_all_equal(self):
        gt = np.random.default_rng(7).uniform(size=(12, 12, 3))
        br, g1, g2, u = total_loss(gt, gt.copy(), gt.copy())
        assert br.total == pytest.approx(0.0, abs=1e-12)
        assert (u == 0).all()

    def test_weight_collapse(self):
        rng = np.random.default_rng(8)
        gt, a, b = rng.uniform(size=(3, 12, 12, 3))
        br, *_ = total_loss(gt, a, b, 5.0, 0.0, 0.0)
        u = np.abs(a - b)
        expect = uncertainty_l1(gt, a, u, 5.0)[0] + uncertainty_l1(gt, b, u, 5.0)[0]
        assert br.total == pytest.approx(expect, abs=1e-15)

    @given(st.integers(0, 1000), st.floats(0, 10), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_composition_identity(self, seed, lam, lam_s, lam_l):
        rng = np.random.default_rng(seed)
        gt, a, b = rng.uniform(size=(3, 11, 11, 3))
        br, *_ = total_loss(gt, a, b, lam, lam_s, lam_l)
        assert br.lpips == 0.0
        assert abs(br.total - _composition(br, lam_s, lam_l)) <= 1e-12

    @pytest.mark.parametrize("detach", [False, True])
    def test_gradient_fd(self, detach):
        rng = np.random.default_rng(9)
        gt, a, b = rng.uniform(size=(3, 12, 12, 3))
        _, g1, g2, _ = total_loss(gt, a, b, detach_uncertainty_weight=detach)

        def f():
            return total_loss(gt, a, b)[0].total

        safe = (np.abs(gt - a) > 1e-6) & (np.abs(gt - b) > 1e-6) & (np.abs(a - b) > 1e-6)
        fd1 = central_difference(f, a)
        fd2 = central_difference(f, b)
        if detach:
            # the detached variant drops a true term, so it must disagree with the full gradient
            assert np.abs(g1 - fd1)[safe].max() > 1e-6
            return
        for g, fd in ((g1, fd1), (g2, fd2)):
            rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
            assert rel[safe].max() < 1e-4

    def test_u_is_not_inside_ssim(self):
        rng = np.random.default_rng(10)
        gt, a, b = rng.uniform(size=(3, 12, 12, 3))
        br, *_ = total_loss(gt, a, b, 50.0, 0.2, 0.0)
        assert br.d_ssim == pytest.approx(d_ssim(gt, a, b), abs=1e-15)

    def test_negative_weight(self):
        z = np.zeros((12, 12, 3))
        with pytest.raises(ContractViolation):
            total_loss(z, z, z, lam_s=-0.1)

    def test_perceptual_plugin(self):
        rng = np.random.default_rng(11)
        gt, a, b = rng.uniform(size=(3, 12, 12, 3))
        register_perceptual_loss(lambda g, p: (float(np.sum((p - g) ** 2)), 2 * (p - g)))
        try:
            br, g1, _, _ = total_loss(gt, a, b, lam_l=0.5)
        finally:
            register_perceptual_loss(None)
        assert br.lpips == pytest.approx(np.sum((a - gt) ** 2) + np.sum((b - gt) ** 2))
        assert abs(br.total - _composition(br, 0.2, 0.5)) <= 1e-12
        plain, p1, _, _ = total_loss(gt, a, b, lam_l=0.5)
        np.testing.assert_allclose(g1 - p1, 0.5 * 2 * (a - gt), atol=1e-15)


class TestVariants:
    def test_ensemble_of_two_matches_dual_value(self):
        # population std of two renders is |a - b| / 2, so use lam doubled
        rng = np.random.default_rng(12)
        gt, a, b = rng.uniform(size=(3, 12, 12, 3))
        br_e, _, u = ensemble_total_loss(gt, [a, b], lam=10.0)
        br_d, *_ = total_loss(gt, a, b, lam=5.0)
        np.testing.assert_allclose(u, np.abs(a - b) / 2, atol=1e-15)
        # lam*u term: 10 * |a-b|/2 == 5 * |a-b|
        assert br_e.total == pytest.approx(br_d.total, abs=1e-12)

    def test_ensemble_gradient_fd(self):
        rng = np.random.default_rng(13)
        gt, a, b, c = rng.uniform(size=(4, 12, 12, 3))
        _, grads, _ = ensemble_total_loss(gt, [a, b, c])
        fd = central_difference(lambda: ensemble_total_loss(gt, [a, b, c])[0].total, c)
        rel = np.abs(grads[2] - fd) / np.maximum(np.maximum(np.abs(grads[2]), np.abs(fd)), 1e-8)
        assert rel.max() < 1e-4

    def test_baseline_is_lambda_zero_half(self):
        rng = np.random.default_rng(14)
        gt, a = rng.uniform(size=(2, 12, 12, 3))
        br, g = baseline_loss(gt, a)
        brd, g1, _, _ = total_loss(gt, a, a.copy(), lam=0.0)
        assert 2 * br.total == pytest.approx(brd.total, abs=1e-12)
        np.testing.assert_allclose(g, g1, atol=1e-15)

    def test_variance_gradients(self):
        rng = np.random.default_rng(15)
        gt, a = rng.uniform(size=(2, 12, 12, 3))
        u = rng.uniform(0, 0.3, (12, 12))
        _, _, gu = variance_loss(gt, a, u)
        fd = central_difference(lambda: variance_loss(gt, a, u)[0].total, u)
        np.testing.assert_allclose(gu, fd, rtol=1e-5, atol=1e-10)


class TestViz:
    def test_examples(self):
        assert (normalize_uncertainty_for_viz(np.full((3, 3, 3), 0.4)) == 0).all()
        u = np.array([[0.1, 0.3, 0.5]])
        np.testing.assert_allclose(normalize_uncertainty_for_viz(u), [[0.0, 0.5, 1.0]], atol=1e-15)

    @given(img((5, 5, 3)))
    def test_range(self, u):
        v = normalize_uncertainty_for_viz(u)
        assert v.shape == (5, 5)
        gray = u.mean(axis=2)
        if gray.max() > gray.min():
            assert v.min() == 0.0 and v.max() == 1.0
        else:
            assert (v == 0).all()
