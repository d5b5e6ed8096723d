import argparse
import os
from decimal import Decimal
from unittest import TestCase, mock

from MISPar import config
from MISPar.entry import run_config_from_dict, load_run_config, output_dir, parse_gpu, policy_arg, getParser
from MISPar.exceptions import ConfigError


class TestRunConfig(TestCase):

    def test_defaults(self):
        run = load_run_config()
        self.assertEqual(run.training.per_replica_batch, 2)
        self.assertEqual(run.training.base_lr, Decimal('1e-4'))
        self.assertEqual(run.data.ratios, (0.70, 0.15, 0.15))
        self.assertEqual(run.cluster().n_gpus, 4)
        self.assertEqual(run.cost_params().grid_size, config.calibrationPrior.grid_size)

    def test_sections(self):
        run = run_config_from_dict({'training': {'base_lr': 2e-4, 'epochs': 10},
                                    'topology': {'nodes': 3},
                                    'cost': {'grid_size': 8, 'heterogeneity': 1.0},
                                    'schedule': [{'trial': 0, 'gpus': ['0:1', '1:0'], 'start': 0, 'duration': 4}]})
        self.assertEqual(run.training.base_lr, Decimal('0.0002'))
        self.assertEqual(run.deployment().epochs, 10)
        self.assertEqual(run.cluster().n_gpus, 12)
        self.assertEqual(run.cluster(nodes=1, gpus_per_node=2).n_gpus, 2)
        self.assertEqual(run.cost_params().grid_size, 8)
        self.assertEqual(run.schedule[0].gpus, ((0, 1), (1, 0)))

    def test_rejects_unknown(self):
        with self.assertRaises(ConfigError):
            run_config_from_dict({'grids': {}})
        with self.assertRaises(ConfigError):
            run_config_from_dict({'training': {'batch_size': 4}})
        with self.assertRaises(ConfigError):
            run_config_from_dict({'cost': {'speed': 1}})
        with self.assertRaises(ConfigError):
            run_config_from_dict({'data': {'crop_mode': 'trailing'}})
        with self.assertRaises(ConfigError):
            run_config_from_dict({'schedule': [{'trial': 0}]})
        with self.assertRaises(ConfigError):
            run_config_from_dict({'topology': {'nodes': 0}}).cluster()
        with self.assertRaises(ConfigError):
            load_run_config('/nonexistent/run.yaml')

    def test_output_dir(self):
        run = run_config_from_dict({'output': {'dir': 'from-config'}})
        self.assertEqual(output_dir(argparse.Namespace(out_dir='from-flag'), run), 'from-flag')
        self.assertEqual(output_dir(argparse.Namespace(out_dir=None), run), 'from-config')
        with mock.patch.dict(os.environ, {config.outputDirEnv: 'from-env'}):
            self.assertEqual(output_dir(argparse.Namespace(out_dir=None), load_run_config()), 'from-env')
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(output_dir(argparse.Namespace(out_dir=None), load_run_config()), 'output')


class TestParser(TestCase):

    def test_parse_gpu(self):
        self.assertEqual(parse_gpu('1:3'), (1, 3))
        with self.assertRaises(ConfigError):
            parse_gpu('13')

    def test_policy_arg(self):
        self.assertEqual(policy_arg('auto'), 'auto')
        self.assertEqual(policy_arg('2'), 2)
        with self.assertRaises(argparse.ArgumentTypeError):
            policy_arg('0')

    def test_get_parser(self):
        args = getParser().parse_args(['simulate', '--nodes', '2', '--policy', '4', '-vv'])
        self.assertEqual((args.command, args.nodes, args.policy, args.verbose), ('simulate', 2, 4, 2))
        args = getParser().parse_args(['arch'])
        self.assertEqual(args.input, [4, 240, 240, 152])
