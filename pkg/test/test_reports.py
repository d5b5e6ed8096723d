import os
import tempfile
from unittest import TestCase

from MISPar import config
from MISPar.archmodel import build_unet3d, TensorShape
from MISPar.clustersim import ClusterTopology
from MISPar.costcal import default_cost_params, predict_table, utilization_table, residual_table
from MISPar.exceptions import IoError, InputError, InvalidCount
from MISPar.reports import (load_reference, format_reference, build_report, wide_table, write_report, emit_plot_data,
                            memory_feasibility_check, bundled_reference_path, Report)
from MISPar.utilities import parse_hms, format_hms


class TestHms(TestCase):

    def test_parse_hms(self):
        self.assertEqual(parse_hms('44:18:02'), 159482)
        self.assertEqual(parse_hms('7:41:12'), 27672)
        with self.assertRaises(InputError):
            parse_hms('7:61:12')
        with self.assertRaises(InputError):
            parse_hms('an hour')

    def test_format_hms(self):
        self.assertEqual(format_hms(10506), '2:55:06')
        self.assertEqual(format_hms(159619), '44:20:19')


class TestReference(TestCase):

    def test_load_reference(self):
        reference = load_reference()
        self.assertEqual(len(reference), 14)
        self.assertEqual(list(reference.columns), ['method', 'n', 'elapsed_s', 'speedup'])
        row = reference[(reference['method'] == 'data_parallel') & (reference['n'] == 32)].iloc[0]
        self.assertEqual(row['elapsed_s'], 12104)
        self.assertAlmostEqual(row['speedup'], 13.18)

    def test_format_reference(self):
        with open(bundled_reference_path()) as f:
            self.assertEqual(format_reference(load_reference()), f.read())

    def test_missing_reference(self):
        with self.assertRaises(IoError):
            load_reference('/nonexistent/reference.csv')
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'bad.csv')
            with open(path, 'w') as f:
                f.write('method,n,speedup\ndata_parallel,1,1.0\n')
            with self.assertRaises(InputError):
                load_reference(path)


class TestReport(TestCase):

    def test_wide_table(self):
        table = wide_table(load_reference())
        self.assertEqual(list(table['n']), list(config.referenceGpuCounts))
        self.assertAlmostEqual(table['experiment_parallel_efficiency'].iloc[-1], 15.19 / 32)

    def test_build_report(self):
        params = default_cost_params()
        reference = load_reference()
        predicted = predict_table(params)
        report = build_report(reference, predicted, utilization_table(params),
                              residual_table(predicted, reference))
        self.assertEqual(len(report), 7)
        self.assertIn('experiment_parallel_utilization', report.table.columns)
        self.assertEqual(len(report.residuals), 14)
        with self.assertRaises(InputError):
            build_report(reference.iloc[0:0])

    def test_write_outputs(self):
        report = build_report(load_reference())
        with tempfile.TemporaryDirectory() as tmp:
            written = write_report(report, tmp)
            self.assertEqual([os.path.basename(p) for p in written], ['report.csv'])
            paths = emit_plot_data(report, tmp)
            self.assertEqual(sorted(os.path.basename(p) for p in paths),
                             ['elapsed.csv', 'elapsed.svg', 'speedup.csv', 'speedup.svg'])
            with open(os.path.join(tmp, 'speedup.csv')) as f:
                lines = f.read().splitlines()
            self.assertEqual(lines[0], 'n,data_parallel,experiment_parallel')
            self.assertEqual(len(lines), 8)
            with open(os.path.join(tmp, 'speedup.svg')) as f:
                first = f.read()
            emit_plot_data(report, tmp)
            with open(os.path.join(tmp, 'speedup.svg')) as f:
                self.assertEqual(f.read(), first)

    def test_repeated_report(self):
        params = default_cost_params(grid_size=8)
        reference = load_reference()
        predicted = predict_table(params, repeats=3, jitter=0.1, seed=2)
        report = build_report(reference, predicted)
        self.assertIn('experiment_parallel_elapsed_min_s', report.table.columns)
        self.assertTrue((report.table['data_parallel_elapsed_min_s']
                         <= report.table['data_parallel_elapsed_max_s']).all())
        with tempfile.TemporaryDirectory() as tmp:
            emit_plot_data(report, tmp)
            with open(os.path.join(tmp, 'elapsed.csv')) as f:
                header = f.readline().strip()
            self.assertEqual(header, 'n,data_parallel,experiment_parallel,data_parallel_min,data_parallel_max,'
                                     'experiment_parallel_min,experiment_parallel_max')
            with open(os.path.join(tmp, 'elapsed.svg')) as f:
                banded = f.read()
            emit_plot_data(build_report(reference, predict_table(params)), tmp)
            with open(os.path.join(tmp, 'elapsed.svg')) as f:
                plain = f.read()
            self.assertIn('PolyCollection', banded)
            self.assertNotIn('PolyCollection', plain)

    def test_emit_empty(self):
        with self.assertRaises(InputError):
            emit_plot_data(Report(table=load_reference().iloc[0:0]), tempfile.gettempdir())


class TestFeasibility(TestCase):

    def test_memory_feasibility_check(self):
        topo = ClusterTopology(node_count=1)
        small = memory_feasibility_check(build_unet3d(), 1, topo, TensorShape(4, 32, 32, 32))
        self.assertTrue(small.passed)
        self.assertEqual(small.headroom_bytes, small.capacity_bytes - small.estimate_bytes)
        full = memory_feasibility_check(build_unet3d(), 2, topo)
        self.assertEqual(full.capacity_bytes, 16 * 2 ** 30)
        self.assertGreater(full.estimate_bytes, small.estimate_bytes)
        with self.assertRaises(InvalidCount):
            memory_feasibility_check(build_unet3d(), 0, topo)
