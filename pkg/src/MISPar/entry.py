"""
Module
------
entry.py:

Summary
-------
Contains routines to facilitate entry of the required input: the command line parser, the YAML run
configuration and logging set-up.

Notes
-----
Run configuration sections: grid, training, topology, cost, data, output, schedule. Every key is optional;
unknown sections or keys are rejected so that a typo cannot silently change a benchmark.
"""
import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from decimal import Decimal

import yaml

from MISPar import config
from MISPar.clustersim import ClusterTopology, TrialAssignment, AUTO
from MISPar.costcal import default_cost_params
from MISPar.datapipe import CROP_MODES
from MISPar.exceptions import ConfigError, MISParError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingSection:
    per_replica_batch: int = config.deployment.per_replica_batch
    base_lr: Decimal = config.deployment.base_lr
    epochs: int = config.deployment.epochs
    epsilon: float = config.deployment.epsilon


@dataclass(frozen=True)
class TopologySection:
    nodes: int = 1
    gpus_per_node: int = config.v100Node.gpus_per_node
    gpu_memory_gib: float = config.v100Node.gpu_memory_bytes / 2 ** 30
    intra_bandwidth: float = config.v100Node.intra_bandwidth
    intra_latency: float = config.v100Node.intra_latency
    inter_bandwidth: float = config.v100Node.inter_bandwidth
    inter_latency: float = config.v100Node.inter_latency


@dataclass(frozen=True)
class DataSection:
    count: int = 8
    dims: tuple = (16, 16, 16)
    blobs: int = 1
    seed: int = 0
    workers: int = 1
    ratios: tuple = config.deployment.ratios
    crop_mode: str = 'leading'
    crop_depth: int = None


@dataclass(frozen=True)
class OutputSection:
    dir: str = None


@dataclass(frozen=True)
class RunConfig:
    grid: dict = field(default_factory=dict)
    training: TrainingSection = TrainingSection()
    topology: TopologySection = TopologySection()
    cost: dict = field(default_factory=dict)
    data: DataSection = DataSection()
    output: OutputSection = OutputSection()
    schedule: tuple = ()

    def deployment(self):
        """Deployment defaults with the training section applied"""
        return config.deployment._replace(per_replica_batch=self.training.per_replica_batch,
                                          base_lr=self.training.base_lr, epochs=self.training.epochs,
                                          epsilon=self.training.epsilon, ratios=self.data.ratios)

    def cluster(self, nodes=None, gpus_per_node=None):
        t = self.topology
        try:
            return ClusterTopology(node_count=t.nodes if nodes is None else nodes,
                                   gpus_per_node=t.gpus_per_node if gpus_per_node is None else gpus_per_node,
                                   gpu_memory_bytes=int(t.gpu_memory_gib * 2 ** 30),
                                   intra_bandwidth=t.intra_bandwidth, intra_latency=t.intra_latency,
                                   inter_bandwidth=t.inter_bandwidth, inter_latency=t.inter_latency)
        except MISParError as err:
            raise ConfigError('load_run_config', f'topology: {err.message}') from None

    def cost_params(self):
        try:
            return default_cost_params(**self.cost).validate('load_run_config')
        except TypeError as err:
            raise ConfigError('load_run_config', f'cost: {err}') from None
        except MISParError as err:
            raise ConfigError('load_run_config', f'cost: {err.message}') from None


_sections = {'training': TrainingSection, 'topology': TopologySection, 'data': DataSection,
             'output': OutputSection}
_costKeys = ('t_step_base', 'beta_intra', 'beta_inter', 'sync_overhead_intra', 'sync_overhead_inter',
             'hop_latency_intra', 'hop_latency_inter', 'grid_size', 'heterogeneity', 'epochs', 'samples_train',
             'grad_bytes')


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError('load_run_config', f'section {name!r} must be a mapping')
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError('load_run_config', f'unknown key(s) in {name}: {", ".join(map(str, unknown))}')
    values = dict(data)
    for key in ('dims', 'ratios'):
        if key in values:
            values[key] = tuple(values[key])
    if 'base_lr' in values:
        values['base_lr'] = Decimal(str(values['base_lr']))
    return cls(**values)


def parse_gpu(text):
    """'node:slot' -> (node, slot)"""
    try:
        node, slot = str(text).split(':')
        return int(node), int(slot)
    except ValueError:
        raise ConfigError('load_run_config', f'GPU must be written node:slot, got {text!r}') from None


def _schedule(entries):
    if entries is None:
        return ()
    if not isinstance(entries, list):
        raise ConfigError('load_run_config', 'schedule must be a list of assignments')
    out = []
    for entry in entries:
        if not isinstance(entry, dict) or set(entry) != {'trial', 'gpus', 'start', 'duration'}:
            raise ConfigError('load_run_config', 'schedule entries need exactly trial, gpus, start, duration')
        gpus = entry['gpus'] if isinstance(entry['gpus'], list) else [entry['gpus']]
        out.append(TrialAssignment(int(entry['trial']), tuple(parse_gpu(g) for g in gpus),
                                   float(entry['start']), float(entry['duration'])))
    return tuple(out)


def run_config_from_dict(data):
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError('load_run_config', 'configuration must be a mapping of sections')
    allowed = {'grid', 'cost', 'schedule'} | set(_sections)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError('load_run_config', f'unknown section(s): {", ".join(map(str, unknown))}')
    grid = data.get('grid') or {}
    if not isinstance(grid, dict):
        raise ConfigError('load_run_config', 'grid must map axis names to value lists')
    cost = data.get('cost') or {}
    if not isinstance(cost, dict):
        raise ConfigError('load_run_config', 'section cost must be a mapping')
    unknown = sorted(set(cost) - set(_costKeys))
    if unknown:
        raise ConfigError('load_run_config', f'unknown key(s) in cost: {", ".join(map(str, unknown))}')
    try:
        sections = {name: _section(cls, data.get(name), name) for name, cls in _sections.items()}
    except TypeError as err:
        raise ConfigError('load_run_config', str(err)) from None
    run = RunConfig(grid=dict(grid), cost=dict(cost), schedule=_schedule(data.get('schedule')), **sections)
    if run.data.crop_mode not in CROP_MODES:
        raise ConfigError('load_run_config', f'crop_mode must be one of {", ".join(CROP_MODES)}')
    return run


def load_run_config(path=None):
    """Read a YAML run configuration; None gives the defaults

    :rtype: RunConfig
    """
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as err:
        raise ConfigError('load_run_config', f'cannot read {path}: {err.strerror or err}') from None
    except yaml.YAMLError as err:
        raise ConfigError('load_run_config', f'{path} is not valid YAML: {err}') from None
    return run_config_from_dict(data)


def load_yaml(path, operation):
    try:
        with open(path) as f:
            return yaml.safe_load(f) or {}
    except OSError as err:
        raise ConfigError(operation, f'cannot read {path}: {err.strerror or err}') from None
    except yaml.YAMLError as err:
        raise ConfigError(operation, f'{path} is not valid YAML: {err}') from None


def output_dir(args, run):
    """--out-dir, then the config output section, then $MISPAR_OUTPUT_DIR, then ./output"""
    if getattr(args, 'out_dir', None):
        return args.out_dir
    if run.output.dir:
        return run.output.dir
    return os.environ.get(config.outputDirEnv) or config.defaultOutputDir


def policy_arg(text):
    if text == AUTO:
        return AUTO
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected auto or a positive integer, got {text!r}') from None
    if value < 1:
        raise argparse.ArgumentTypeError(f'GPUs per trial must be positive, got {value}')
    return value


def setLogging(verbosity=0):
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(format=config.logFormat, level=level, stream=sys.stderr, force=True)


def getParser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML run configuration')
    common.add_argument('--out-dir', help=f'output directory (default ${config.outputDirEnv} or ./output)')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v info, -vv debug')

    parser = argparse.ArgumentParser(prog='mispar', description='Data parallelism vs experiment parallelism '
                                                                'for 3D U-Net hyper-parameter search')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('grid', parents=[common], help='expand the hyper-parameter grid')
    p.add_argument('--gpus', type=int, default=1, help='GPU count for the batch and lr scaling rules')
    p.add_argument('--out', help='also write the CSV to this file')

    p = sub.add_parser('arch', parents=[common], help='3D U-Net layer table and parameter count')
    p.add_argument('--base-filters', type=int, default=8)
    p.add_argument('--steps', type=int, default=4)
    p.add_argument('--input', type=int, nargs=4, metavar=('C', 'H', 'W', 'D'),
                   default=list(config.deployment.tile))
    p.add_argument('--no-bias', action='store_true', help='convolutions without bias')
    p.add_argument('--exclude-running-stats', action='store_true', help='do not count batchnorm running stats')
    p.add_argument('--transposed-width', choices=('half', 'full'), default='half')
    p.add_argument('--csv', action='store_true', help='layer table as CSV')
    p.add_argument('--yaml', action='store_true', help='parameter breakdown as YAML')
    p.add_argument('--search', action='store_true', help='rank counting conventions by distance to the target')
    p.add_argument('--batch', type=int, help='check memory feasibility at this per-replica batch')

    p = sub.add_parser('dice-check', parents=[common], help='finite-difference check of the Dice gradients')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--cases', type=int, default=100)

    p = sub.add_parser('pack', parents=[common], help='synthesise, preprocess and pack volumes')
    p.add_argument('--count', type=int)
    p.add_argument('--dims', type=int, nargs=3, metavar=('H', 'W', 'D'))
    p.add_argument('--blobs', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--workers', type=int)
    p.add_argument('--ratios', type=float, nargs=3)
    p.add_argument('--crop-mode', choices=CROP_MODES)
    p.add_argument('--crop-depth', type=int)
    p.add_argument('--out', help='record file (default <out-dir>/volumes.dmis)')

    p = sub.add_parser('simulate', parents=[common], help='simulate one strategy on a cluster')
    p.add_argument('--nodes', type=int)
    p.add_argument('--gpus-per-node', type=int)
    p.add_argument('--strategy', choices=('data', 'experiment'), default='experiment')
    p.add_argument('--policy', type=policy_arg, default=AUTO, help='GPUs per trial: auto or an integer')
    p.add_argument('--params', help='YAML cost parameters (e.g. from calibrate)')
    p.add_argument('--repeats', type=int, default=1, help='repeated noisy runs; prints mean, min and max')
    p.add_argument('--jitter', type=float, default=0.0, help='relative duration noise per repeated run')
    p.add_argument('--seed', type=int, default=0, help='seed of the duration noise')

    p = sub.add_parser('calibrate', parents=[common], help='fit the cost model to a reference table')
    p.add_argument('--reference', default='bundled')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--bounds', help='YAML file of [low, high] per calibration scalar')
    p.add_argument('--no-polish', action='store_true', help='skip the Nelder-Mead stage')

    p = sub.add_parser('report', parents=[common], help='tables and plot data for both strategies')
    p.add_argument('--reference', default='bundled')
    p.add_argument('--params', help='YAML cost parameters; predicted report instead of the reference')
    p.add_argument('--repeats', type=int, default=1, help='average each prediction over repeated noisy runs')
    p.add_argument('--jitter', type=float, default=0.0, help='relative duration noise per repeated run')
    p.add_argument('--seed', type=int, default=0, help='seed of the duration noise')
    return parser
