import os
import sys
import unittest

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from estimators.errors import (DimensionMismatch, FirstStageSingular, LinearSEMError, NoNegativeControls,
                               TooFewOutcomes)
from estimators.linear_sem import (Dataset, LinearSEMOptimizer, Selection, bootstrap_ci, branch_and_bound,
                                   enumerate_rotations, estimate_effects, fit_factors, population_loadings,
                                   select_negative_controls, selection_objective, spectral_truncation,
                                   sphere_grid_search, threshold_from_spectrum)
from estimators.linear_sem.optimizer import collinearity_condition
from estimators.linear_sem.selector import threshold_tolerance
from estimators.simgen import LinearDesign, gen_linear, selection_error_rates


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestFactorFit(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """One sample of the p=30 simulation design."""
        cls.design = LinearDesign(p=30)
        cls.data = gen_linear(cls.design, 2000, seed=5)

    def test_threshold_from_spectrum(self):
        """Spectrum (10, 5, 2, 2) with two factors and n=100 gives sigma2 = 1."""
        sigma2, delta = threshold_from_spectrum([10, 5, 2, 2], 2, 100)
        self.assertAlmostEqual(sigma2, 1.0)
        self.assertAlmostEqual(delta, 0.16651, places=5)

    def test_truncation_identity(self):
        """Gamma Gamma' equals the top-k spectral truncation of the covariance."""
        fit = fit_factors(self.data)
        np.testing.assert_allclose(fit.loadings @ fit.loadings.T,
                                   spectral_truncation(self.data, fit.num_factors), atol=1e-10)

    def test_override(self):
        """A factor count override replaces the Kaiser count."""
        fit = fit_factors(self.data, num_factors_override=2)
        self.assertEqual(fit.num_factors, 2)
        self.assertTrue(fit.overridden)
        self.assertEqual(fit.loadings.shape, (30, 2))

    def test_fit_structure(self):
        """Spectrum is descending and the threshold is positive."""
        fit = fit_factors(self.data)

        # Verify result structure
        self.assertEqual(fit.p, 30)
        self.assertTrue(np.all(np.diff(fit.spectrum) <= 0))
        self.assertGreater(fit.delta, 0)
        self.assertTrue(fit.enough_outcomes)
        self.assertIn('sigma2_hat', fit.summary())

    def test_too_few_outcomes(self):
        """Two outcomes cannot carry a factor model."""
        rng = np.random.default_rng(0)
        with self.assertRaises(TooFewOutcomes):
            fit_factors(Dataset(x=rng.normal(size=50), y=rng.normal(size=(50, 2))))

    def test_more_outcomes_than_rows(self):
        """n <= p is rejected."""
        rng = np.random.default_rng(0)
        with self.assertRaises(DimensionMismatch):
            fit_factors(Dataset(x=rng.normal(size=5), y=rng.normal(size=(5, 6))))


class TestSelector(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Population loadings of the p=30 design."""
        cls.design = LinearDesign(p=30)
        cls.loadings = cls.design.loadings()

    def test_population_loadings_rows(self):
        """Rows are (sigma_X beta_j, alpha_j + beta_j alpha_X)."""
        expected = np.r_[-1.0, 1.5 - 1.0, 2.1 - 1.0]
        np.testing.assert_allclose(self.loadings[0], expected)
        np.testing.assert_allclose(population_loadings(1.0, [0.0], [[2.0, 3.0]], [1.0, 1.0]), [[0.0, 2.0, 3.0]])

    def test_rotated_population_recovers_zero_set(self):
        """Any rotation of the population loadings gives back outcomes 13 to 30."""
        rng = np.random.default_rng(21)
        for _ in range(3):
            rotated = self.loadings @ random_rotation(3, rng)
            selection = select_negative_controls(rotated, delta=1e-6)
            np.testing.assert_array_equal(selection.s0_hat, np.arange(12, 30))
            self.assertEqual(selection.objective, 12)

    def test_random_directions_never_beat_truth(self):
        """No direction zeroes more than the 18 true negative controls."""
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 5000))
        w /= np.linalg.norm(w, axis=0)
        self.assertGreaterEqual(int(selection_objective(self.loadings, w, 1e-6).min()), 12)

    def test_single_factor(self):
        """With one column the zero rows are exactly the near-zero loadings."""
        selection = enumerate_rotations(np.array([[0.0], [1.0], [0.0], [-2.0]]), delta=0.0)
        np.testing.assert_array_equal(selection.s0_hat, [0, 2])
        self.assertEqual(selection.objective, 2)

    def test_general_position_lower_bound(self):
        """Generic loadings allow at most d-1 zeros at delta = 0."""
        rng = np.random.default_rng(8)
        for d in (2, 3):
            g = rng.normal(size=(9, d))
            selection = enumerate_rotations(g, delta=0.0)
            self.assertGreaterEqual(selection.objective, 9 - (d - 1))

    def test_enumeration_matches_branch_and_bound(self):
        """Enumeration and branch and bound reach the same minimum; the grid never goes below it."""
        rng = np.random.default_rng(13)
        for _ in range(30):
            p, d = int(rng.integers(5, 11)), int(rng.integers(2, 4))
            g = rng.normal(size=(p, d))
            enum = enumerate_rotations(g, delta=0.3)
            bnb = branch_and_bound(g, delta=0.3)
            self.assertEqual(enum.objective, bnb.objective)
            self.assertTrue(bnb.diagnostics['complete'])
            if d == 2:
                self.assertGreaterEqual(sphere_grid_search(g, delta=0.3).objective, enum.objective)

    def assert_methods_agree(self, g: np.ndarray, delta: float):
        """Exact searches tie; the 1 degree grid is sandwiched by its angular resolution."""
        enum = enumerate_rotations(g, delta)
        bnb = branch_and_bound(g, delta)
        self.assertTrue(bnb.diagnostics['complete'])
        self.assertEqual(enum.objective, bnb.objective)
        margin = float(np.linalg.norm(g, axis=1).max()) * np.deg2rad(1.0)
        self.assertGreaterEqual(sphere_grid_search(g, delta).objective, enum.objective)
        self.assertLessEqual(sphere_grid_search(g, delta + margin).objective, enum.objective)
        return enum, bnb

    def test_three_methods_on_noiseless_loadings(self):
        """All three searches return the ten-outcome design's zero set under any rotation."""
        loadings = LinearDesign(p=10).loadings()
        rng = np.random.default_rng(31)
        for _ in range(3):
            rotated = loadings @ random_rotation(3, rng)
            enum, bnb = self.assert_methods_agree(rotated, 0.1)
            grid = sphere_grid_search(rotated, 0.1)
            for selection in (enum, bnb, grid):
                self.assertEqual(selection.objective, 4)
                np.testing.assert_array_equal(selection.s0_hat, np.arange(4, 10))

    def test_three_methods_on_noisy_loadings(self):
        """Perturbed design loadings and random three-column loadings give matching optima."""
        loadings = LinearDesign(p=10).loadings()
        rng = np.random.default_rng(32)
        for _ in range(3):
            noisy = loadings @ random_rotation(3, rng) + rng.normal(scale=0.02, size=loadings.shape)
            self.assert_methods_agree(noisy, 0.1)
        for _ in range(5):
            g = rng.normal(size=(int(rng.integers(6, 10)), 3))
            self.assert_methods_agree(g, 0.3)

    def test_selection_invariants(self):
        """s0 is the sorted set of thresholded rows of the unit-norm rotation."""
        rng = np.random.default_rng(4)
        g = rng.normal(size=(10, 3))
        for method in ('enumeration', 'branch_and_bound', 'sphere_grid'):
            selection = select_negative_controls(g, delta=0.25, method=method)
            self.assertAlmostEqual(float(np.linalg.norm(selection.w_star)), 1.0, places=12)
            np.testing.assert_allclose(selection.y_star, g @ selection.w_star)
            self.assertTrue(np.all(np.diff(selection.s0_hat) > 0))
            self.assertTrue(np.all(np.abs(selection.y_star[selection.s0_hat]) <= threshold_tolerance(0.25)))
            self.assertEqual(selection.objective, 10 - selection.s0_hat.size)
            self.assertEqual(selection.objective, selection_objective(g, selection.w_star, 0.25))
            np.testing.assert_array_equal(np.union1d(selection.s0_hat, selection.targets), np.arange(10))

    def test_bare_loadings_need_threshold(self):
        """A loading matrix without delta is refused."""
        with self.assertRaises(LinearSEMError):
            select_negative_controls(self.loadings)

    def test_unknown_method(self):
        """Unknown methods are refused."""
        with self.assertRaises(LinearSEMError):
            select_negative_controls(self.loadings, delta=0.1, method='annealing')


class TestEffectEstimation(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Unconfounded outcomes y = x beta + noise with the last three as controls."""
        rng = np.random.default_rng(17)
        n = 2000
        cls.beta = np.array([1.0, -2.0, 0.5, 0.0, 0.0, 0.0])
        cls.x = rng.normal(size=n)
        cls.y = cls.x[:, None] * cls.beta[None, :] + rng.normal(size=(n, 6))
        cls.data = Dataset(x=cls.x, y=cls.y)
        cls.selection = Selection.fixed([3, 4, 5], 6)

    def test_oracle_without_confounding(self):
        """Without latent confounders the estimate is close to the truth."""
        estimate = estimate_effects(self.data, self.selection, seed=0)
        np.testing.assert_allclose(estimate.beta_hat, self.beta, atol=0.1)
        np.testing.assert_array_equal(estimate.beta_hat[3:], 0.0)
        self.assertEqual(sorted(estimate.lambdas), [0, 1, 2])

    def test_all_negative_controls(self):
        """When every outcome is a control all effects are zero."""
        estimate = estimate_effects(self.data, Selection.fixed(range(6), 6))
        np.testing.assert_array_equal(estimate.beta_hat, np.zeros(6))

    def test_no_negative_controls(self):
        """An empty control set is refused."""
        with self.assertRaises(NoNegativeControls):
            estimate_effects(self.data, Selection.fixed([], 6))

    def test_exposure_scale_equivariance(self):
        """Scaling X by c divides every effect by c at fixed penalties."""
        first = estimate_effects(self.data, self.selection, seed=0)
        scaled = Dataset(x=2.0 * self.x, y=self.y)
        second = estimate_effects(scaled, self.selection, fixed_lambdas=first.lambdas)
        np.testing.assert_allclose(second.beta_hat, first.beta_hat / 2.0, rtol=1e-8, atol=1e-12)

    def test_outcome_scale_equivariance(self):
        """Scaling every outcome by c multiplies the effects by c once the penalties grow by c squared."""
        first = estimate_effects(self.data, self.selection, seed=0)
        c = 3.0
        scaled = Dataset(x=self.x, y=c * self.y)
        lambdas = {j: c ** 2 * lam for j, lam in first.lambdas.items()}
        second = estimate_effects(scaled, self.selection, fixed_lambdas=lambdas)
        np.testing.assert_allclose(second.beta_hat, c * first.beta_hat, rtol=1e-7, atol=1e-10)

    def test_single_target_scale(self):
        """Scaling one target outcome scales only its own effect."""
        first = estimate_effects(self.data, self.selection, seed=0)
        y = self.y.copy()
        y[:, 1] *= 5.0
        second = estimate_effects(Dataset(x=self.x, y=y), self.selection, fixed_lambdas=first.lambdas)
        expected = first.beta_hat.copy()
        expected[1] *= 5.0
        np.testing.assert_allclose(second.beta_hat, expected, rtol=1e-7, atol=1e-10)

    def test_well_posed_design_has_no_collinearity_warning(self):
        """Independent controls leave X clear of the fitted control directions."""
        estimate = estimate_effects(self.data, self.selection, seed=0)
        self.assertEqual(estimate.diagnostics['warnings'], [])
        self.assertLess(max(estimate.diagnostics['collinearity_condition'].values()), 1e6)

    def test_control_proportional_to_exposure_warns(self):
        """A control equal to 2X puts X inside the fitted controls."""
        y = np.column_stack([self.y[:, :2], 2.0 * self.x])
        estimate = estimate_effects(Dataset(x=self.x, y=y), Selection.fixed([2], 3), fixed_lambdas={0: 1.0, 1: 1.0})
        self.assertEqual(len(estimate.diagnostics['warnings']), 2)
        self.assertGreater(estimate.diagnostics['collinearity_condition'][0], 1e10)

    def test_collinearity_condition_ignores_trailing_directions(self):
        """Directions past the confounder rank do not count toward collinearity."""
        rng = np.random.default_rng(18)
        x = rng.normal(size=500)
        confounder = rng.normal(size=500)
        fitted = np.column_stack([10.0 * confounder, 0.01 * x + 1e-5 * rng.normal(size=500)])
        self.assertLess(collinearity_condition(x, fitted, 1), 10.0)
        self.assertGreater(collinearity_condition(x, fitted, 2), 100.0)
        self.assertEqual(collinearity_condition(x, fitted, 0), 1.0)

    def test_singular_first_stage(self):
        """Two identical targets make the first stage of a third target singular."""
        y = self.y.copy()
        y[:, 2] = y[:, 1]
        with self.assertRaises(FirstStageSingular):
            estimate_effects(Dataset(x=self.x, y=y), self.selection, seed=0)

    def test_table_rows(self):
        """The per-outcome table marks the controls."""
        rows = estimate_effects(self.data, self.selection, seed=0).table()
        self.assertEqual(len(rows), 6)
        self.assertTrue(rows[4]['negative_control'])
        self.assertIsNone(rows[4]['lambda'])


class TestBootstrap(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Outcome 1 is exactly 2x; outcomes 2 and 3 are independent noise."""
        rng = np.random.default_rng(9)
        x = rng.normal(size=300)
        cls.data = Dataset(x=x, y=np.column_stack([2.0 * x, rng.normal(size=(300, 2))]))
        cls.selection = Selection.fixed([1, 2], 3)

    def test_degenerate_interval(self):
        """An exact linear outcome gives the interval [2, 2]."""
        boot = bootstrap_ci(self.data, self.selection, B=100, seed=1)
        np.testing.assert_allclose(boot['intervals'][0], [2.0, 2.0], atol=1e-8)
        np.testing.assert_array_equal(boot['intervals'][1:], 0.0)
        self.assertEqual(boot['resamples'] + boot['failures'], 100)

    def test_deterministic(self):
        """The same seed gives the same intervals."""
        rng = np.random.default_rng(10)
        x = rng.normal(size=200)
        y = np.column_stack([x + rng.normal(size=200), rng.normal(size=(200, 2))])
        data = Dataset(x=x, y=y)
        first = bootstrap_ci(data, self.selection, B=100, seed=3)
        second = bootstrap_ci(data, self.selection, B=100, seed=3)
        np.testing.assert_array_equal(first['intervals'], second['intervals'])

    def test_too_few_resamples(self):
        """Fewer than 100 resamples is refused."""
        with self.assertRaises(LinearSEMError):
            bootstrap_ci(self.data, self.selection, B=50)


class TestLinearSEMOptimizer(unittest.TestCase):
    def test_run_success(self):
        """A full run on simulated data reports every stage."""
        data = gen_linear(LinearDesign(p=30), 2000, seed=11)
        result = LinearSEMOptimizer({'seed': 0}).run(data)

        # Verify result structure
        self.assertEqual(result['status'], 'success')
        for key in ('factors', 'selection', 'effects', 'timestamp'):
            self.assertIn(key, result)
        selection, effects = result['selection'], result['effects']
        self.assertGreater(selection.s0_hat.size, 0)
        np.testing.assert_array_equal(effects.beta_hat[selection.s0_hat], 0.0)

    def test_population_loadings_give_no_false_negatives(self):
        """At the sample threshold the design's own loadings reveal exactly its zero set for p = 30, 60, 100."""
        for p in (30, 60, 100):
            design = LinearDesign(p=p)
            fit = fit_factors(gen_linear(design, 2000, seed=p))
            selection = enumerate_rotations(design.loadings(), fit.delta)
            _, fnr = selection_error_rates(selection.s0_hat, design.beta)
            self.assertEqual(fnr, 0.0)
            np.testing.assert_array_equal(selection.s0_hat, design.zero_set)

    def test_seeded_runs_recover_effects(self):
        """Seeded samples of size 2000 keep every true effect out of the controls and land near beta."""
        design = LinearDesign(p=30)
        for seed in range(3):
            result = LinearSEMOptimizer({'seed': 0}).run(gen_linear(design, 2000, seed))
            self.assertEqual(result['status'], 'success')
            _, fnr = selection_error_rates(result['selection'].s0_hat, design.beta)
            self.assertEqual(fnr, 0.0)
            np.testing.assert_allclose(result['effects'].beta_hat[:4], design.beta[:4], atol=0.25)
            self.assertEqual(result['effects'].diagnostics['warnings'], [])

    def test_run_error(self):
        """Too few outcomes fail at the factor stage with a status dict."""
        rng = np.random.default_rng(0)
        result = LinearSEMOptimizer().run(Dataset(x=rng.normal(size=50), y=rng.normal(size=(50, 2))))
        self.assertEqual(result['status'], 'error')
        self.assertEqual(result['stage'], 'factors')
        self.assertEqual(result['error_type'], 'TooFewOutcomes')
        self.assertEqual(result['exit_code'], 3)


@unittest.skipUnless(os.getenv('RUN_SLOW_TESTS'), "Set RUN_SLOW_TESTS=1 for Monte Carlo checks")
class TestFactorCountMonteCarlo(unittest.TestCase):
    def test_kaiser_picks_three(self):
        """The Kaiser rule finds the exposure plus two confounders in at least 95% of samples."""
        design = LinearDesign(p=30)
        hits = sum(fit_factors(gen_linear(design, 2000, seed)).num_factors == 3 for seed in range(100))
        self.assertGreaterEqual(hits, 95)

    def test_three_methods_agree_many(self):
        """Agreement of the exact searches on 200 random instances, with the 1 degree grid within its resolution."""
        rng = np.random.default_rng(99)
        for _ in range(200):
            p, d = int(rng.integers(5, 13)), int(rng.integers(2, 4))
            g = rng.normal(size=(p, d))
            enum = enumerate_rotations(g, 0.3)
            self.assertEqual(enum.objective, branch_and_bound(g, 0.3).objective)
            margin = float(np.linalg.norm(g, axis=1).max()) * np.deg2rad(1.0)
            self.assertGreaterEqual(sphere_grid_search(g, 0.3).objective, enum.objective)
            self.assertLessEqual(sphere_grid_search(g, 0.3 + margin).objective, enum.objective)


if __name__ == '__main__':
    unittest.main()
