"""
Module
------
MISPar.py: Wrapper for the data parallelism vs experiment parallelism toolkit

Summary
-------
    Parses the command line and the run configuration.

    Dispatches to one subcommand: grid, arch, dice-check, pack, simulate, calibrate or report.

    Maps package errors to exit codes: 0 success, 1 domain error, 2 usage or configuration error.
    Each failure prints one line naming the failing operation and error class.
"""
import dataclasses
import os
import sys

import pandas as pd
import yaml

from MISPar import config
from MISPar.archmodel import (build_unet3d, TensorShape, layer_table, count_params, search_param_conventions,
                               encoder_filters)
from MISPar.clustersim import (Schedule, StrategyKind, plan_data_parallel, plan_experiment_parallel, simulate,
                               repeat_average)
from MISPar.costcal import (CostParams, calibrate, predict_table, utilization_table, residual_table,
                            duration_oracle)
from MISPar.datapipe import synth_volume, process_volume, pack_records, write_manifest, manifest_path
from MISPar.entry import getParser, load_run_config, load_yaml, output_dir, setLogging
from MISPar.exceptions import MISParError, ConfigError, ModelError, IoError
from MISPar.hpgrid import HyperSpace, HyperAxis, cross_product, grid_table, default_specs
from MISPar.lossmath import gradient_check
from MISPar.reports import (load_reference, build_report, write_report, emit_plot_data, memory_feasibility_check,
                            tableOut)
from MISPar.utilities import Spinner

DICE_TOLERANCE = 1e-5


def _write(path, text, operation):
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', newline='\n') as f:
            f.write(text)
    except OSError as err:
        raise IoError(operation, f'cannot write {path}: {err.strerror or err}') from err
    return path


def _specs(run):
    if run.grid:
        space = HyperSpace.from_mapping(run.grid)
    else:
        space = HyperSpace([HyperAxis('base_lr', [run.training.base_lr])])
    return cross_product(space, run.deployment())


def _load_params(path):
    data = load_yaml(path, 'load_params')
    data = data.get('params', data)
    try:
        return CostParams.from_dict(data, 'load_params').validate('load_params')
    except TypeError as err:
        raise ConfigError('load_params', str(err)) from None
    except ModelError as err:
        raise ConfigError('load_params', err.message) from None


def doGrid(args, run):
    table = grid_table(_specs(run), args.gpus)
    text = table.to_csv(index=False, lineterminator='\n')
    sys.stdout.write(text)
    if args.out:
        _write(args.out, text, 'grid')


def doArch(args, run):
    desc = build_unet3d(args.base_filters, args.steps, in_channels=args.input[0], bias=not args.no_bias,
                        transposed_width=args.transposed_width)
    shape = TensorShape(*args.input)
    running = not args.exclude_running_stats
    table = layer_table(desc, shape, running)
    breakdown = count_params(desc, running)

    if args.csv:
        sys.stdout.write(table.to_csv(index=False, lineterminator='\n'))
    else:
        tableOut(table, lenVal=10)
        print(f'Encoder filters {"-".join(map(str, encoder_filters(desc)))}')
        print(f'Total parameters {breakdown.total}  (target {config.referenceParamTotal}, '
              f'delta {breakdown.total - config.referenceParamTotal:+d})')
        print()

    if args.yaml:
        dump = {'convention': {'bias': not args.no_bias, 'running_stats': running,
                               'transposed_width': args.transposed_width},
                'summary': breakdown.summary(),
                'layers': [dataclasses.asdict(p) for p in breakdown.layers]}
        sys.stdout.write(yaml.safe_dump(dump, sort_keys=False))

    if args.search:
        tableOut(search_param_conventions(base_filters=args.base_filters, steps=args.steps,
                                          in_channels=args.input[0]), lenVal=10)

    if args.batch is not None:
        check = memory_feasibility_check(desc, args.batch, run.cluster(), shape)
        verdict = 'fits' if check.passed else 'does not fit'
        print(f'Batch {args.batch} {verdict}: estimate {check.estimate_bytes / 2 ** 30:.2f} GiB of '
              f'{check.capacity_bytes / 2 ** 30:.2f} GiB, headroom {check.headroom_bytes / 2 ** 30:.2f} GiB')


def doDiceCheck(args, run):
    worst = gradient_check(seed=args.seed, cases=args.cases, eps=run.training.epsilon)
    failed = False
    for name, deviation in worst.items():
        passed = deviation < DICE_TOLERANCE
        failed = failed or not passed
        print(f'{name + " dice gradient":30}max relative deviation {deviation:.3e}  {"ok" if passed else "FAILED"}')
    return 1 if failed else 0


def doPack(args, run):
    d = run.data
    count = d.count if args.count is None else args.count
    dims = d.dims if args.dims is None else tuple(args.dims)
    blobs = d.blobs if args.blobs is None else args.blobs
    seed = d.seed if args.seed is None else args.seed
    workers = d.workers if args.workers is None else args.workers
    ratios = d.ratios if args.ratios is None else tuple(args.ratios)
    mode = d.crop_mode if args.crop_mode is None else args.crop_mode
    depth = d.crop_depth if args.crop_depth is None else args.crop_depth
    path = args.out or os.path.join(output_dir(args, run), 'volumes.dmis')

    samples = [process_volume(synth_volume(seed + i, dims, blobs), depth, mode) for i in range(count)]
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    manifest = pack_records(samples, workers, path, ratios, seed)
    write_manifest(manifest, manifest_path(path))
    sizes = {name: len(manifest.ids(name)) for name in ('train', 'val', 'test')}
    print(f'Packed {len(manifest.entries)} records into {path}')
    print(f'Split train/val/test: {sizes["train"]}/{sizes["val"]}/{sizes["test"]}')


def doSimulate(args, run):
    topo = run.cluster(args.nodes, args.gpus_per_node)
    params = _load_params(args.params) if args.params else run.cost_params()
    if run.grid:
        specs = _specs(run)
    else:
        specs = default_specs(params.grid_size, run.training.epochs, run.training.per_replica_batch)
    if len(specs) != params.grid_size:
        params = dataclasses.replace(params, grid_size=len(specs))
    repeated = args.repeats != 1 or args.jitter != 0

    cost = duration_oracle(params, topo)
    if args.strategy == 'data':
        planner = plan_data_parallel
    else:
        def planner(s, t, c):
            return plan_experiment_parallel(s, t, c, args.policy)
    if run.schedule:
        if repeated:
            raise ConfigError('simulate', '--repeats and --jitter need a planned schedule, not an injected one')
        schedule = Schedule(StrategyKind.ExperimentParallel, run.schedule)
    else:
        schedule = planner(specs, topo, cost)
    result = simulate(schedule, topo)

    out = output_dir(args, run)
    makespan = pd.DataFrame([{'trial': a.experiment_id, 'gpus': '+'.join(f'{node}:{slot}' for node, slot in a.gpus),
                              'start': a.start, 'duration': a.duration, 'finish': a.finish}
                             for a in result.assignments], columns=['trial', 'gpus', 'start', 'duration', 'finish'])
    _write(os.path.join(out, 'makespan.csv'), makespan.to_csv(index=False, lineterminator='\n'), 'simulate')
    _write(os.path.join(out, 'trace.txt'), '\n'.join(result.trace_lines()) + '\n', 'simulate')
    util = pd.DataFrame([{'gpu': f'{node}:{slot}', 'utilization': u}
                         for (node, slot), u in sorted(result.utilization.items())], columns=['gpu', 'utilization'])
    _write(os.path.join(out, 'utilization.csv'), util.to_csv(index=False, lineterminator='\n'), 'simulate')

    print(f'Strategy {schedule.strategy.value} on {topo.node_count}x{topo.gpus_per_node} GPUs, '
          f'{len(result.assignments)} trials')
    print(f'Elapsed {result.elapsed:.1f} s, utilisation {result.overall_utilization:.3f}')

    if repeated:
        spread = repeat_average(planner, specs, topo, cost, args.repeats, args.jitter, args.seed)
        runs = pd.DataFrame({'run': range(1, len(spread.runs) + 1), 'elapsed_s': spread.runs})
        _write(os.path.join(out, 'repeats.csv'), runs.to_csv(index=False, lineterminator='\n'), 'simulate')
        print(f'Mean elapsed over {len(spread.runs)} runs {spread.mean:.1f} s '
              f'(min {spread.min:.1f} s, max {spread.max:.1f} s)')


def doCalibrate(args, run):
    reference = load_reference(args.reference)
    bounds = config.searchBounds
    if args.bounds:
        data = load_yaml(args.bounds, 'calibrate')
        unknown = sorted(set(data) - set(config.CalibrationVector._fields))
        if unknown:
            raise ConfigError('calibrate', f'unknown bound(s): {", ".join(map(str, unknown))}')
        try:
            bounds = bounds._replace(**{k: (float(v[0]), float(v[1])) for k, v in data.items()})
        except (TypeError, IndexError, ValueError):
            raise ConfigError('calibrate', 'bounds must be [low, high] pairs') from None
    settings = config.searchSettings._replace(polish=not args.no_polish)

    print('Calibrating cost model. Please wait ... ', end='', flush=True)
    with Spinner():
        result = calibrate(reference, bounds=bounds, seed=args.seed, settings=settings,
                           epochs=run.training.epochs)
    print()

    out = output_dir(args, run)
    fitted = {'params': result.params.to_dict(), 'objective': result.objective, 'seed': args.seed,
              'trace': result.trace}
    _write(os.path.join(out, 'fitted_params.yaml'), yaml.safe_dump(fitted, sort_keys=False), 'calibrate')
    _write(os.path.join(out, 'residuals.csv'), result.residuals.to_csv(index=False, lineterminator='\n'),
           'calibrate')
    tableOut(result.residuals)
    print(f'Objective {result.objective:.6g}, grid size {result.params.grid_size}, '
          f'max |residual| {result.residuals["residual"].abs().max():.4f}')


def doReport(args, run):
    reference = load_reference(args.reference)
    repeated = args.repeats != 1 or args.jitter != 0
    if args.params:
        params = _load_params(args.params)
        ns = sorted(set(reference['n']))
        predicted = predict_table(params, ns, repeats=args.repeats, jitter=args.jitter, seed=args.seed)
        report = build_report(reference, predicted, utilization_table(params, ns),
                              residual_table(predicted, reference))
    elif repeated:
        raise ConfigError('report', '--repeats and --jitter apply to predictions; give --params')
    else:
        report = build_report(reference)
    out = output_dir(args, run)
    write_report(report, out)
    emit_plot_data(report, out)
    tableOut(report.table)


commands = {'grid': doGrid, 'arch': doArch, 'dice-check': doDiceCheck, 'pack': doPack,
            'simulate': doSimulate, 'calibrate': doCalibrate, 'report': doReport}


def run_command(argv=None):
    """Run one subcommand

    :param argv: arguments without the program name (Optional, Default=sys.argv[1:])
    :type argv: list[str]
    :return: exit status
    :rtype: int
    """
    parser = getParser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return exit_.code if isinstance(exit_.code, int) else 2

    setLogging(args.verbose)
    try:
        run = load_run_config(args.config)
        status = commands[args.command](args, run)
    except ConfigError as err:
        print(f'error: {err.diagnostic()}', file=sys.stderr)
        return 2
    except MISParError as err:
        print(f'error: {err.diagnostic()}', file=sys.stderr)
        return 1
    return status or 0


def main():
    sys.exit(run_command())
