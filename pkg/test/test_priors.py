import unittest

import numpy as np

from dept.cpsgraph import build_graph
from dept.numerics import Tensor, gradient_check
from dept.priors import (PrefitConfig, PriorError, PriorParams, causal_deviation, cone_decay,
                         estimate_speed, prefit_prior_params, prefit_priors, prior_components,
                         prior_score, time_decay)

MEAN_SPEED = 100.0


def line_graph(positions):
    return build_graph([(i, (x, 0.0)) for i, x in enumerate(positions)])


class TestCausalDeviation(unittest.TestCase):

    def test_examples(self):
        self.assertEqual(causal_deviation(2, 2, 10.0, 0.0), 0.0)
        self.assertEqual(causal_deviation(0, 3, 10.0, 25.0), 5.0)
        self.assertEqual(causal_deviation(4, 5, 10.0, 300.0), -290.0)

    def test_non_positive_speed(self):
        with self.assertRaises(PriorError):
            causal_deviation(0, 1, 0.0, 10.0)
        with self.assertRaises(PriorError):
            causal_deviation(0, 1, np.array([1.0, -2.0]), 10.0)

    def test_translation_invariant(self):
        a = line_graph([0.0, 300.0, 900.0])
        b = build_graph([(i, (x + 50.0, -20.0)) for i, x in enumerate([0.0, 300.0, 900.0])])
        for i in range(3):
            for j in range(3):
                self.assertAlmostEqual(causal_deviation(0, 2, 90.0, a.distance(i, j)),
                                       causal_deviation(0, 2, 90.0, b.distance(i, j)))


class TestPriorComponents(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.prior = PriorParams(3, 4, 3, MEAN_SPEED, hidden=4, rng=self.rng)
        self.graph = line_graph([0.0, 300.0, 600.0])

    def _score(self, i, j, tau, rho, phi_q=None, phi_k=None):
        phi_q = np.ones(4) if phi_q is None else phi_q
        phi_k = np.ones(4) if phi_k is None else phi_k
        return float(prior_score(phi_q, phi_k, i, j, tau, rho, self.prior, self.graph).value)

    def test_speed_is_softplus_of_average(self):
        c = 2.5
        self.prior.nu_o_w.assign(np.zeros((4, 1)))
        self.prior.nu_d_w.assign(np.zeros((4, 1)))
        self.prior.nu_o_b.assign([c])
        self.prior.nu_d_b.assign([c])
        self.prior.speed_lut.assign(np.full((3, 3), c))
        v = estimate_speed(np.ones(4), np.ones(4), 0, 1, self.prior)
        self.assertAlmostEqual(float(v.value), np.logaddexp(0.0, c))

    def test_speed_stays_positive(self):
        self.prior.nu_o_w.assign(np.zeros((4, 1)))
        self.prior.nu_d_w.assign(np.zeros((4, 1)))
        self.prior.nu_o_b.assign([-40.0])
        self.prior.nu_d_b.assign([-40.0])
        self.prior.speed_lut.assign(np.full((3, 3), -40.0))
        v = estimate_speed(np.ones(4), np.ones(4), 0, 1, self.prior)
        self.assertGreater(float(v.value), 0.0)

    def test_lut_shift_is_additive(self):
        before = self._score(0, 1, 0, 2)
        lut = self.prior.attn_lut.value.copy()
        lut[0, 1] += 0.75
        self.prior.attn_lut.assign(lut)
        self.assertAlmostEqual(self._score(0, 1, 0, 2), before + 0.75, places=12)

    def test_symmetric_pairs(self):
        self.prior.attn_lut.assign(np.zeros((3, 3)))
        self.prior.speed_lut.assign(np.zeros((3, 3)))
        self.assertAlmostEqual(self._score(0, 1, 0, 1), self._score(1, 2, 0, 1), places=12)

    def test_self_pair(self):
        expected = (float(self.prior.gamma(0.0).value) + float(self.prior.sigma(0.0).value)
                    + self.prior.attn_lut.value[2, 2])
        self.assertAlmostEqual(self._score(2, 2, 1, 1), expected, places=12)

    def test_components_sum(self):
        phi = self.rng.normal(size=(3, 4))
        nodes = np.array([0, 1, 2])
        lags = np.array([0, 1, 2])
        parts = prior_components(phi[:, None, :], phi[None, :, :], nodes[:, None], nodes[None, :],
                                 lags[:, None], lags[None, :], self.prior, self.graph)
        total = prior_score(phi[:, None, :], phi[None, :, :], nodes[:, None], nodes[None, :],
                            lags[:, None], lags[None, :], self.prior, self.graph)
        np.testing.assert_allclose(parts['cone'].value + parts['time'].value + parts['lut'].value,
                                   total.value, atol=1e-12)
        no_cone = prior_components(phi[:, None, :], phi[None, :, :], nodes[:, None], nodes[None, :],
                                   lags[:, None], lags[None, :], self.prior, self.graph, use_cone=False)
        self.assertIsNone(no_cone['cone'])

    def test_visible_pairs_only(self):
        phi = self.rng.normal(size=(3, 4))
        nodes = np.array([0, 1, 2])
        lags = np.array([0, 1, 2])
        args = (phi[:, None, :], phi[None, :, :], nodes[:, None], nodes[None, :],
                lags[:, None], lags[None, :], self.prior, self.graph)
        visible = lags[:, None] <= lags[None, :]
        full = prior_components(*args)['cone'].value
        cone = prior_components(*args, visible=visible)['cone'].value
        np.testing.assert_allclose(cone[visible], full[visible], rtol=0, atol=1e-12)
        np.testing.assert_array_equal(cone[~visible], 0.0)

    def test_heads_are_independent(self):
        other = PriorParams(3, 4, 3, MEAN_SPEED, hidden=4, rng=np.random.default_rng(6))
        phi = np.ones(4)
        before = float(prior_score(phi, phi, 0, 1, 0, 1, other, self.graph).value)
        self.prior.attn_lut.assign(self.prior.attn_lut.value + 3.0)
        after = float(prior_score(phi, phi, 0, 1, 0, 1, other, self.graph).value)
        self.assertEqual(before, after)

    def test_gradient(self):
        phi = self.rng.normal(size=(3, 4))
        nodes = np.array([0, 1, 2])
        lags = np.array([0, 1, 2])
        weights = self.rng.normal(size=(3, 3))

        def fn():
            score = prior_score(phi[:, None, :], phi[None, :, :], nodes[:, None], nodes[None, :],
                                lags[:, None], lags[None, :], self.prior, self.graph)
            return (score * weights).sum()
        self.assertLess(gradient_check(fn, self.prior.parameters()), 1e-4)


class TestPrefit(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.config = PrefitConfig(mean_speed=MEAN_SPEED)
        cls.rng = np.random.default_rng(0)
        cls.prior = PriorParams(9, 16, 10, MEAN_SPEED, rng=cls.rng, name='test.prior')
        cls.report = prefit_prior_params(cls.prior, cls.config, cls.rng)

    def test_curves_fit_target(self):
        self.assertLess(self.report.gamma_mse, 1e-3)
        self.assertLess(self.report.sigma_mse, 1e-3)
        self.assertTrue(self.report.converged)

    def test_gamma_shape(self):
        x = np.linspace(-3.0, 3.0, 241)
        y = self.prior.gamma(x).value
        self.assertLessEqual(abs(x[np.argmax(y)]), 0.1)
        self.assertAlmostEqual(float(self.prior.gamma(0.0).value), 0.0, delta=0.05)
        self.assertAlmostEqual(float(self.prior.gamma(2.0).value), -4 * 0.5, delta=0.05)
        far = np.abs(x) >= 0.5
        self.assertTrue(np.all(float(self.prior.gamma(0.0).value) > y[far]))
        np.testing.assert_allclose(y, y[::-1], atol=0.05)

    def test_time_decay_shape(self):
        values = [float(time_decay(float(d), self.prior).value) for d in range(10)]
        self.assertTrue(all(np.isfinite(values)))
        self.assertTrue(all(values[0] >= v for v in values[1:]))
        self.assertGreater(values[1], values[5])

    def test_luts(self):
        n = self.prior.attn_lut.value.size
        self.assertLess(abs(self.prior.attn_lut.value.mean()), 3 * 0.1 / np.sqrt(n))
        self.assertLess(abs(self.prior.speed_lut.value.mean() - MEAN_SPEED), 3 * 0.1 / np.sqrt(n))

    def test_speed_nets(self):
        self.assertLess(abs(self.report.nu_o_mean - MEAN_SPEED), 0.2)
        self.assertLess(abs(self.report.nu_d_mean - MEAN_SPEED), 0.2)
        rng = np.random.default_rng(9)
        phi_q = rng.normal(size=(200, 16))
        phi_k = rng.normal(size=(200, 16))
        i = rng.integers(0, 4, 200)
        j = rng.integers(0, 4, 200)
        v = estimate_speed(phi_q, phi_k, i, j, self.prior).value
        inside = (v >= 0.5 * MEAN_SPEED) & (v <= 2 * MEAN_SPEED)
        self.assertGreaterEqual(inside.mean(), 0.95)

    def test_cone_pattern(self):
        # 3x3 grid, 1 km apart
        graph = build_graph([(3 * r + c, (1000.0 * c, 1000.0 * r)) for r in range(3) for c in range(3)])
        nodes = np.arange(9)
        distance = np.round(graph.distances, 6)
        phi = np.random.default_rng(12).normal(size=(9, 16))
        prior = self.prior
        lut = prior.attn_lut.value.copy()
        prior.attn_lut.assign(np.zeros((9, 9)))
        try:
            for delta in (1, 2, 3):
                score = prior_score(phi[:, None, :], phi[None, :, :], nodes[:, None], nodes[None, :],
                                    0, delta, prior, graph).value
                groups = sorted(np.unique(distance), key=lambda d: abs(delta * MEAN_SPEED - d))
                means = [score[distance == d].mean() for d in groups]
                self.assertTrue(all(a > b for a, b in zip(means, means[1:])), (delta, means))
        finally:
            prior.attn_lut.assign(lut)

    def test_cone_decay_normalizes(self):
        eps = np.array([0.0, 1000.0])
        direct = self.prior.gamma(eps / self.prior.deviation_unit).value
        np.testing.assert_allclose(cone_decay(Tensor(eps), self.prior).value, direct)


class TestPrefitGrid(unittest.TestCase):

    def test_grid_shape_and_config_errors(self):
        config = PrefitConfig(mean_speed=MEAN_SPEED, fit_iterations=10)
        grid = prefit_priors(config, num_nodes=2, blocks=2, heads=3, d_model=4, t_max=3, hidden=4, seed=1)
        self.assertEqual(len(grid), 2)
        self.assertEqual([len(row) for row in grid], [3, 3])
        names = {p.name for row in grid for prior in row for p in prior.parameters()}
        self.assertEqual(len(names), sum(len(prior.parameters()) for row in grid for prior in row))
        with self.assertRaises(PriorError):
            PrefitConfig(mean_speed=0.0)
        with self.assertRaises(PriorError):
            PrefitConfig(curvature=-1.0)


if __name__ == '__main__':
    unittest.main()
