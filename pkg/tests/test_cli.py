import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
import yaml

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from estimators.categorical import forward_joint, g_formula
from estimators.cli import main, resolve_config
from estimators.cli.config import SEED_ENV, load_yaml
from estimators.cli.reports import read_report, to_jsonable, write_report
from estimators.errors import ConfigError
from estimators.simgen import ReplicationReport, categorical_design


class CLITestCase(unittest.TestCase):
    def setUp(self):
        """Fresh working directory per test."""
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, name: str) -> str:
        return str(self.tmp / name)


class TestSimulateCommand(CLITestCase):
    def test_categorical_deterministic(self):
        """Two runs with one seed write identical files."""
        first, second = self.path('a.csv'), self.path('b.csv')
        for output in (first, second):
            code = main(['simulate', '--design', 'categorical', '--n', '200', '--seed', '3', '--output', output])
            self.assertEqual(code, 0)
        self.assertEqual(Path(first).read_text(), Path(second).read_text())
        frame = pd.read_csv(first)
        self.assertEqual(list(frame.columns), ['x', 'y1', 'y2', 'y3'])
        self.assertEqual(len(frame), 200)

    def test_linear_with_metadata(self):
        """A linear sample has x plus 30 outcomes and a metadata sidecar."""
        output = self.path('linear.csv')
        code = main(['simulate', '--design', 'linear', '--n', '500', '--p', '30', '--seed', '4', '--output', output])
        self.assertEqual(code, 0)
        frame = pd.read_csv(output)
        self.assertEqual(frame.shape, (500, 31))
        meta = json.loads(Path(self.path('linear.meta.json')).read_text())
        self.assertEqual(meta['design'], 'linear')
        self.assertEqual(meta['beta'][:4], [-1.0, 2.0, -3.0, 4.0])
        self.assertEqual(meta['zero_set'][0], 13)
        self.assertEqual(meta['seed'], 4)

    def test_missing_sample_size(self):
        """simulate without --n is a usage error."""
        self.assertEqual(main(['simulate', '--design', 'linear', '--seed', '1']), 1)


class TestFitCategoricalCommand(CLITestCase):
    def test_missing_column(self):
        """A file without y3 is a parse error."""
        source = self.path('bad.csv')
        pd.DataFrame({'x': [1, 2], 'y1': [1, 2], 'y2': [2, 1]}).to_csv(source, index=False)
        self.assertEqual(main(['fit-categorical', '--input', source, '--output', self.path('r.json')]), 2)
        self.assertFalse(os.path.exists(self.path('r.json')))

    def test_bad_label(self):
        """Non-integer labels are reported as a parse error."""
        source = self.path('bad.csv')
        pd.DataFrame({'x': [1, 2], 'y1': [1, 'a'], 'y2': [2, 1], 'y3': [1, 1]}).to_csv(source, index=False)
        self.assertEqual(main(['fit-categorical', '--input', source]), 2)

    def test_population_recovery(self):
        """An exact probability table gives back the causal distribution."""
        source = self.path('population.csv')
        forward_joint(categorical_design()).to_frame().to_csv(source, index=False)
        output = self.path('population.report.json')
        code = main(['fit-categorical', '--input', source, '--population', '--output', output])
        self.assertEqual(code, 0)

        document = read_report(output)
        self.assertEqual(document['status'], 'success')
        self.assertTrue(document['conditions']['identifiable'])
        expected = to_jsonable(g_formula(categorical_design()))
        for got, want in zip(document['potential_outcomes'], expected):
            np.testing.assert_allclose(got, want, atol=1e-6)
        self.assertTrue(os.path.exists(self.path('population.report.txt')))

    def test_repeat_fit_same_report(self):
        """Fitting one table twice writes the same bytes both times."""
        source = self.path('population.csv')
        forward_joint(categorical_design()).to_frame().to_csv(source, index=False)
        output = self.path('population.report.json')
        written = []
        for _ in range(2):
            self.assertEqual(main(['fit-categorical', '--input', source, '--population', '--output', output]), 0)
            written.append((Path(output).read_bytes(), Path(self.path('population.report.txt')).read_bytes()))
        self.assertEqual(written[0], written[1])
        self.assertNotIn('timestamp', read_report(output))

    def test_samples(self):
        """Simulated records fit end to end."""
        source = self.path('samples.csv')
        self.assertEqual(main(['simulate', '--design', 'categorical', '--n', '20000', '--seed', '8',
                               '--output', source]), 0)
        output = self.path('samples.report.json')
        self.assertEqual(main(['fit-categorical', '--input', source, '--output', output]), 0)
        document = read_report(output)
        self.assertEqual(document['n'], 20000)
        self.assertIn('refined', document)
        self.assertLessEqual(document['refined']['objective'], document['refined']['warm_objective'])


class TestFitLinearCommand(CLITestCase):
    def test_success(self):
        """A simulated linear sample produces a report with one effect per analyzed outcome."""
        source = self.path('linear.csv')
        self.assertEqual(main(['simulate', '--design', 'linear', '--n', '2000', '--seed', '5',
                               '--output', source]), 0)
        output = self.path('fit.json')
        self.assertEqual(main(['fit-linear', '--input', source, '--seed', '0', '--output', output]), 0)

        document = read_report(output)
        self.assertEqual(document['status'], 'success')
        self.assertEqual(document['p'], 30)
        self.assertEqual(len(document['effects']['table']), len(document['selection']['y_star']))
        self.assertIn('diagonality', document)

    def test_too_few_outcomes(self):
        """Two outcomes are refused with exit code 3 and a failure section."""
        rng = np.random.default_rng(0)
        x = rng.normal(size=300)
        source = self.path('two.csv')
        pd.DataFrame({'x': x, 'y1': 2 * x + rng.normal(size=300), 'y2': x + rng.normal(size=300)}).to_csv(
            source, index=False)
        output = self.path('two.json')
        self.assertEqual(main(['fit-linear', '--input', source, '--seed', '0', '--output', output]), 3)

        document = read_report(output)
        self.assertEqual(document['status'], 'error')
        self.assertEqual(document['failure']['stage'], 'factors')
        self.assertEqual(document['failure']['error_type'], 'TooFewOutcomes')

    def test_unknown_flag(self):
        """Unknown flags are usage errors."""
        self.assertEqual(main(['fit-linear', '--bogus']), 1)


class TestConfigResolution(CLITestCase):
    def write_yaml(self, content: dict) -> str:
        path = self.path('config.yaml')
        Path(path).write_text(yaml.safe_dump(content))
        return path

    def test_precedence(self):
        """Flags beat the YAML file, which beats the environment seed."""
        path = self.write_yaml({'seed': 7, 'logging': {'level': 'debug'}, 'categorical': {'max_iter': 50}})
        with mock.patch.dict(os.environ, {SEED_ENV: '5'}):
            env_only = resolve_config('simulate', {'n': 10})
            from_yaml = resolve_config('simulate', {'n': 10}, path)
            from_flag = resolve_config('simulate', {'n': 10, 'seed': 9}, path)
        self.assertEqual(env_only.seed, 5)
        self.assertEqual(from_yaml.seed, 7)
        self.assertEqual(from_flag.seed, 9)
        self.assertEqual(from_yaml.max_iter, 50)
        self.assertEqual(from_yaml.log_level, 'DEBUG')

    def test_unknown_key(self):
        """Unknown YAML keys are configuration errors."""
        with self.assertRaises(ConfigError):
            load_yaml(self.write_yaml({'linear': {'lambda_magic': 3}}))

    def test_validation_lists_problems(self):
        """Every invalid setting is reported at once."""
        with self.assertRaises(ConfigError) as ctx:
            resolve_config('replicate', {'runs': 5, 'folds': 1, 'seed': 1})
        problems = ctx.exception.details['problems']
        self.assertEqual(len(problems), 2)

    def test_pervasive_threshold_opt_in(self):
        """The diagonality check uses the plain rate unless the pervasive rate is requested."""
        default = resolve_config('fit-linear', {'input': 'a.csv', 'seed': 1})
        self.assertFalse(default.linear_settings()['pervasive_threshold'])
        path = self.write_yaml({'linear': {'pervasive_threshold': True}})
        self.assertTrue(resolve_config('fit-linear', {'input': 'a.csv', 'seed': 1}, path).pervasive_threshold)

    def test_replication_settings(self):
        """--full-grid expands to the nine (n, p) cells."""
        config = resolve_config('replicate', {'seed': 1, 'full_grid': True})
        settings = config.replication_settings()
        self.assertEqual(len(settings['cells']), 9)
        self.assertNotIn('seed', settings['linear'])


class TestReplicateCommand(CLITestCase):
    def test_small_sweep(self):
        """A ten-run sweep of one cell writes its report."""
        config = self.path('replication.yaml')
        Path(config).write_text(yaml.safe_dump({'replicate': {'table': 'table1', 'runs': 10, 'cells': [[500, 30]]}}))
        output = self.path('table1.json')
        self.assertEqual(main(['replicate', '--config', config, '--seed', '2', '--output', output]), 0)

        document = read_report(output)
        self.assertEqual(document['table'], 'table1')
        self.assertEqual(len(document['cells']), 1)
        self.assertEqual(document['cells'][0]['metrics']['FPRx10000']['published'], 58)

    def test_same_seed_same_report(self):
        """Repeating a sweep with one seed rewrites byte-identical report files."""
        config = self.path('replication.yaml')
        Path(config).write_text(yaml.safe_dump({'replicate': {'table': 'table1', 'runs': 10, 'cells': [[500, 30]]}}))
        output = self.path('table1.json')
        written = []
        for _ in range(2):
            self.assertEqual(main(['replicate', '--config', config, '--seed', '2', '--output', output]), 0)
            written.append((Path(output).read_bytes(), Path(self.path('table1.txt')).read_bytes()))
        self.assertEqual(written[0], written[1])
        self.assertNotIn('wall_time', read_report(output))

    def test_too_few_runs(self):
        """Fewer than ten runs is a usage error."""
        self.assertEqual(main(['replicate', '--runs', '5', '--seed', '1']), 1)

    def test_failure_rate_exit(self):
        """More than 5% failed runs gives exit code 4 after writing the report."""
        report = ReplicationReport(table='table1', runs=10, seed=1, workers=1,
                                   cells=[{'n': 500, 'p': 30, 'attempted': 10, 'failures': 2, 'metrics': {}}])
        outcome = {'status': 'success', 'report': report, 'failure_rate': report.failure_rate}
        output = self.path('failed.json')
        with mock.patch('estimators.cli.commands.ReplicationManager.run', return_value=outcome):
            code = main(['replicate', '--table', 'table1', '--runs', '10', '--seed', '1', '--output', output])
        self.assertEqual(code, 4)
        self.assertEqual(read_report(output)['failures'], 2)


class TestReports(CLITestCase):
    def test_numbers_round_trip(self):
        """Floats read back from a report equal the values written."""
        json_path, text_path = write_report(self.path('numbers'), {'x': np.array([0.1, 1 / 3])}, 'numbers')
        self.assertEqual(json_path.suffix, '.json')
        self.assertEqual(read_report(str(json_path))['x'], [0.1, 1 / 3])
        self.assertEqual(text_path.read_text(), 'numbers\n')


if __name__ == '__main__':
    unittest.main()
