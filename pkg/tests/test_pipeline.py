import os
import sys
import unittest

import numpy as np
import pandas as pd

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from estimators.errors import CovariateCollinearity, InputError, NonPositiveLog
from estimators.linear_sem import Dataset, FactorFit, fit_factors
from estimators.pipeline import (RawTable, check_error_diagonality, is_degenerate_exposure, residualize,
                                 run_linear_workflow, screen_outcomes, threshold_rate)
from estimators.simgen import LinearDesign, gen_linear


def linear_frame(p: int = 30, n: int = 2000, seed: int = 0) -> pd.DataFrame:
    data = gen_linear(LinearDesign(p=p), n, seed)
    frame = pd.DataFrame(data.y, columns=[f'y{j + 1}' for j in range(p)])
    frame.insert(0, 'x', data.x)
    return frame


class TestRawTable(unittest.TestCase):
    def test_outcomes_default_to_remaining_columns(self):
        """Every column other than the exposure and covariates is an outcome."""
        frame = pd.DataFrame({'x': [1.0, 2.0], 'a': [0.0, 1.0], 'b': [1.0, 0.0], 'c': [3.0, 4.0]})
        raw = RawTable.from_frame(frame, 'x', covariates=['c'])
        self.assertEqual(raw.outcomes, ['a', 'b'])
        self.assertEqual((raw.n, raw.p, raw.q), (2, 2, 1))

    def test_missing_rows_dropped(self):
        """Rows with a missing value are removed and counted."""
        frame = pd.DataFrame({'x': [1.0, 2.0, np.nan, 4.0], 'y1': [1.0, np.nan, 3.0, 4.0], 'y2': [0.0, 1.0, 2.0, 3.0]})
        raw = RawTable.from_frame(frame, 'x')
        self.assertEqual(raw.dropped_rows, 2)
        self.assertEqual(raw.n, 2)

    def test_missing_column(self):
        """Unknown columns are input errors."""
        frame = pd.DataFrame({'x': [1.0], 'y1': [2.0]})
        with self.assertRaises(InputError):
            RawTable.from_frame(frame, 'x', outcomes=['y1', 'y2'])
        with self.assertRaises(InputError):
            RawTable.from_frame(frame, 'x', log_columns=['z'])

    def test_non_numeric_column(self):
        """Text columns are refused."""
        frame = pd.DataFrame({'x': [1.0, 2.0], 'y1': ['a', 'b']})
        with self.assertRaises(InputError):
            RawTable.from_frame(frame, 'x')


class TestResidualize(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Exposure and outcomes driven by one covariate v."""
        rng = np.random.default_rng(1)
        n = 500
        v = rng.normal(size=n)
        cls.frame = pd.DataFrame({
            'x': v + rng.normal(size=n),
            'y1': 3.0 * v + rng.normal(size=n),
            'y2': rng.normal(size=n),
            'y3': np.exp(rng.normal(size=n)),
            'v': v,
        })

    def test_no_covariates_centers(self):
        """Without covariates residualizing only centers."""
        raw = RawTable.from_frame(self.frame, 'x', outcomes=['y1', 'y2', 'y3'])
        data = residualize(raw)
        self.assertTrue(data.centered)
        np.testing.assert_allclose(data.x, self.frame['x'] - self.frame['x'].mean(), atol=1e-12)
        np.testing.assert_allclose(data.y[:, 1], self.frame['y2'] - self.frame['y2'].mean(), atol=1e-12)

    def test_covariate_removed(self):
        """Residualized outcomes are uncorrelated with the covariate."""
        raw = RawTable.from_frame(self.frame, 'x', outcomes=['y1', 'y2', 'y3'], covariates=['v'])
        data = residualize(raw)
        v = self.frame['v'].to_numpy()
        self.assertLess(abs(float(np.corrcoef(data.y[:, 0], v)[0, 1])), 1e-10)
        self.assertLess(abs(float(np.corrcoef(data.x, v)[0, 1])), 1e-10)
        self.assertEqual(data.outcome_names, ('y1', 'y2', 'y3'))

    def test_log_transform(self):
        """Positive columns may be logged; nonpositive ones are refused."""
        raw = RawTable.from_frame(self.frame, 'x', outcomes=['y1', 'y3'], log_columns=['y3'])
        data = residualize(raw)
        logged = np.log(self.frame['y3'].to_numpy())
        np.testing.assert_allclose(data.y[:, 1], logged - logged.mean(), atol=1e-12)
        with self.assertRaises(NonPositiveLog):
            residualize(RawTable.from_frame(self.frame, 'x', outcomes=['y1', 'y2'], log_columns=['y2']))

    def test_collinear_covariates(self):
        """Duplicate covariates make the design rank deficient."""
        frame = self.frame.assign(w=2.0 * self.frame['v'])
        raw = RawTable.from_frame(frame, 'x', outcomes=['y1', 'y2'], covariates=['v', 'w'])
        with self.assertRaises(CovariateCollinearity):
            residualize(raw)

    def test_degenerate_exposure(self):
        """An exposure equal to a covariate has a zero residual."""
        frame = self.frame.assign(v=self.frame['x'])
        data = residualize(RawTable.from_frame(frame, 'x', outcomes=['y1', 'y2'], covariates=['v']))
        self.assertTrue(is_degenerate_exposure(data))
        self.assertFalse(is_degenerate_exposure(residualize(RawTable.from_frame(self.frame, 'x', ['y1']))))


class TestScreening(unittest.TestCase):
    def test_strong_outcome_retained(self):
        """An outcome equal to 5X plus noise passes; statistics cover every outcome."""
        rng = np.random.default_rng(2)
        x = rng.normal(size=400)
        y = np.column_stack([5.0 * x + rng.normal(size=400), rng.normal(size=(400, 2))])
        result = screen_outcomes(Dataset(x=x, y=y))
        self.assertIn(0, result.retained.tolist())
        self.assertEqual(len(result.statistics), 3)
        self.assertEqual(list(result.statistics.columns), ['outcome', 'coefficient', 'se', 'threshold', 'retained'])

    def test_multiplier(self):
        """With 20 outcomes the threshold is sqrt(2 log 20) standard errors."""
        rng = np.random.default_rng(3)
        x = rng.normal(size=200)
        stats = screen_outcomes(Dataset(x=x, y=rng.normal(size=(200, 20)))).statistics
        np.testing.assert_allclose(stats['threshold'] / stats['se'], 2.4477, atol=1e-4)

    def test_rescaling_invariance(self):
        """Rescaling outcomes or the exposure leaves the retained set unchanged."""
        rng = np.random.default_rng(4)
        x = rng.normal(size=300)
        y = x[:, None] * np.array([0.3, 0.0, 1.0, 0.1]) + rng.normal(size=(300, 4))
        base = screen_outcomes(Dataset(x=x, y=y)).retained
        scaled = screen_outcomes(Dataset(x=7.0 * x, y=y * np.array([10.0, 0.1, 3.0, 1e3]))).retained
        np.testing.assert_array_equal(base, scaled)

    def test_null_outcome_dropped(self):
        """An outcome unrelated to X is dropped in at least 95% of samples."""
        rng = np.random.default_rng(5)
        dropped = 0
        for _ in range(200):
            x = rng.normal(size=200)
            y = np.column_stack([2.0 * x + rng.normal(size=200), rng.normal(size=(200, 19))])
            dropped += 1 not in screen_outcomes(Dataset(x=x, y=y)).retained
        self.assertGreaterEqual(dropped, 190)

    def test_constant_exposure(self):
        """A constant exposure retains nothing."""
        rng = np.random.default_rng(6)
        result = screen_outcomes(Dataset(x=np.ones(50), y=rng.normal(size=(50, 3))))
        self.assertEqual(result.retained.size, 0)


class TestErrorDiagonality(unittest.TestCase):
    def test_threshold_rate(self):
        """The default rate is sqrt(log p / n); the pervasive rate adds 1/sqrt(p)."""
        self.assertAlmostEqual(threshold_rate(30, 2000), 0.0412383, places=6)
        self.assertAlmostEqual(threshold_rate(30, 2000), np.sqrt(np.log(30) / 2000))
        self.assertAlmostEqual(threshold_rate(30, 2000, pervasive=True),
                               np.sqrt(np.log(30) / 2000) + 1 / np.sqrt(30))

    def test_shared_noise_flagged(self):
        """Extra noise shared by outcomes 13 and 16 is flagged and one of them is dropped."""
        design = LinearDesign(p=30)
        data = gen_linear(design, 2000, seed=12)
        shared = np.random.default_rng(13).normal(scale=2.0, size=2000)
        y = data.y.copy()
        y[:, 12] += shared
        y[:, 15] += shared
        data = Dataset(x=data.x, y=y)
        report = check_error_diagonality(data, fit_factors(data, 3))

        pairs = {(i, j) for i, j, _ in report.offdiagonals}
        self.assertIn((12, 15), pairs)
        subset = report.suggested_subset.tolist()
        self.assertFalse(12 in subset and 15 in subset)
        block = report.thresholded[np.ix_(subset, subset)]
        np.testing.assert_array_equal(block - np.diag(np.diag(block)), 0.0)
        summary = report.summary(data.outcome_names)
        self.assertTrue({'y13', 'y16'} & set(summary['removed']))

    def test_two_correlated_outcomes(self):
        """With zero loadings two correlated outcomes drop the later one."""
        rng = np.random.default_rng(14)
        z = rng.normal(size=500)
        y = np.column_stack([z + 0.3 * rng.normal(size=500), z + 0.3 * rng.normal(size=500)])
        data = Dataset(x=rng.normal(size=500), y=y)
        fit = FactorFit(num_factors=1, loadings=np.zeros((2, 1)), spectrum=np.ones(2), sigma2_hat=1.0,
                        delta=0.1, n=500)
        report = check_error_diagonality(data, fit, pervasive=False)
        self.assertEqual(report.nonzero_offdiagonals, 1)
        self.assertEqual(report.removed, [1])
        np.testing.assert_array_equal(report.suggested_subset, [0])


class TestLinearWorkflow(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Simulated outcomes with an unrelated covariate."""
        cls.frame = linear_frame(seed=21)
        cls.frame['v'] = np.random.default_rng(22).normal(size=len(cls.frame))

    def test_success(self):
        """Every stage runs and the report carries each result."""
        raw = RawTable.from_frame(self.frame, 'x', covariates=['v'])
        result = run_linear_workflow(raw, {'seed': 0})

        # Verify result structure
        self.assertEqual(result['status'], 'success')
        self.assertEqual((result['n'], result['p'], result['q']), (2000, 30, 1))
        for key in ('screening', 'factors', 'diagonality', 'selection', 'effects'):
            self.assertIn(key, result)
        self.assertEqual(len(result['screening']), 30)
        self.assertEqual(result['effects'].beta_hat.shape[0], len(result['analyzed_outcomes']))
        self.assertFalse(result['diagonality'].pervasive)

    def test_pervasive_threshold_setting(self):
        """The pervasive_threshold key widens the diagonality rate."""
        raw = RawTable.from_frame(self.frame, 'x', covariates=['v'])
        result = run_linear_workflow(raw, {'seed': 0, 'pervasive_threshold': True})
        self.assertEqual(result['status'], 'success')
        self.assertTrue(result['diagonality'].pervasive)
        self.assertTrue(result['diagonality'].summary()['pervasive'])

    def test_without_screening(self):
        """With screening off every outcome is analyzed."""
        raw = RawTable.from_frame(self.frame, 'x', covariates=['v'])
        result = run_linear_workflow(raw, {'seed': 0, 'screen': False})
        self.assertEqual(result['status'], 'success')
        self.assertEqual(result['analyzed_outcomes'], raw.outcomes)
        self.assertNotIn('screening', result)

    def test_screening_that_keeps_everything(self):
        """When screening retains every outcome the effects match the unscreened run."""
        design = LinearDesign(p=30, alpha_x=(2.0, 0.5))
        data = gen_linear(design, 2000, seed=23)
        frame = pd.DataFrame(data.y, columns=[f'y{j + 1}' for j in range(30)])
        frame.insert(0, 'x', data.x)
        raw = RawTable.from_frame(frame, 'x')
        screened = run_linear_workflow(raw, {'seed': 0})
        unscreened = run_linear_workflow(raw, {'seed': 0, 'screen': False})
        self.assertTrue(screened['screening']['retained'].all())
        np.testing.assert_allclose(screened['effects'].beta_hat, unscreened['effects'].beta_hat, rtol=0, atol=1e-12)

    def test_degenerate_exposure_fails(self):
        """An exposure explained by a covariate stops at residualize."""
        frame = self.frame.assign(v=self.frame['x'])
        result = run_linear_workflow(RawTable.from_frame(frame, 'x', covariates=['v']))
        self.assertEqual(result['status'], 'error')
        self.assertEqual(result['stage'], 'residualize')
        self.assertEqual(result['error_type'], 'PipelineError')
        self.assertNotIn('factors', result)


@unittest.skipUnless(os.getenv('RUN_SLOW_TESTS'), "Set RUN_SLOW_TESTS=1 for Monte Carlo checks")
class TestDiagonalityMonteCarlo(unittest.TestCase):
    def test_no_false_alarms(self):
        """Under the model the pervasive rate leaves at least 90% of samples with no surviving off-diagonal."""
        design = LinearDesign(p=30)
        clean = 0
        for seed in range(100):
            data = gen_linear(design, 2000, seed)
            report = check_error_diagonality(data, fit_factors(data, 3), pervasive=True)
            clean += report.nonzero_offdiagonals == 0
        self.assertGreaterEqual(clean, 90)


if __name__ == '__main__':
    unittest.main()
