"""
Module
------
reports.py: Reference data, reports and plot output

Summary
-------
Loads the bundled reference speedup table (or a user supplied one), assembles per-GPU-count reports for both
strategies, writes plot data as CSV with an SVG line chart of each, and checks whether the network fits in
GPU memory.

Notes
-----
Reference CSV columns are method, n, speedup and either elapsed (H:MM:SS) or elapsed_s (seconds).
SVG output is byte-stable: the hash salt is fixed and no date is embedded.
"""
import collections
import io
import logging
import os
from dataclasses import dataclass

import matplotlib
import numpy as np
import pandas as pd
from astropy.io import ascii
from matplotlib.figure import Figure

from MISPar import config
from MISPar.archmodel import TensorShape, estimate_activation_memory
from MISPar.exceptions import IoError, InputError
from MISPar.utilities import parse_hms, format_hms

logger = logging.getLogger(__name__)

_labels = {'data_parallel': 'Data parallelism', 'experiment_parallel': 'Experiment parallelism'}
_markers = {'data_parallel': 'o', 'experiment_parallel': 's'}

Feasibility = collections.namedtuple('Feasibility', 'passed estimate_bytes capacity_bytes headroom_bytes')


def bundled_reference_path():
    return os.path.join(os.path.dirname(__file__), 'data', config.bundledReference)


def load_reference(path=None):
    """Read a reference table

    :param path: CSV file, or None / 'bundled' for the packaged table
    :type path: str
    :return: long table with columns method, n, elapsed_s, speedup
    :rtype: pd.DataFrame
    """
    if path is None or path == 'bundled':
        path = bundled_reference_path()
    if not os.path.isfile(path):
        raise IoError('load_reference', f'reference file {path} not found')
    try:
        table = ascii.read(path, guess=False, format='csv', header_start=0, data_start=1).to_pandas()
    except Exception as err:
        raise InputError('load_reference', f'cannot parse {path}: {err}') from err

    if 'elapsed_s' not in table.columns:
        if 'elapsed' not in table.columns:
            raise InputError('load_reference', 'reference needs an elapsed or elapsed_s column')
        table['elapsed_s'] = [parse_hms(v) for v in table['elapsed']]
    for column in ('method', 'n', 'speedup'):
        if column not in table.columns:
            raise InputError('load_reference', f'reference has no {column} column')
    frame = pd.DataFrame({'method': table['method'].astype(str), 'n': table['n'].astype(int),
                          'elapsed_s': table['elapsed_s'], 'speedup': table['speedup'].astype(float)})
    logger.debug('loaded %d reference rows from %s', len(frame), path)
    return frame


def format_reference(reference):
    """Reference table as CSV text in the bundled layout (elapsed as H:MM:SS, speedups to 2 places)"""
    out = pd.DataFrame({'method': reference['method'], 'n': reference['n'],
                        'elapsed': [format_hms(v) for v in reference['elapsed_s']],
                        'speedup': [f'{v:.2f}' for v in reference['speedup']]})
    return out.to_csv(index=False, lineterminator='\n')


@dataclass
class Report:
    """Per-n elapsed time, speedup and efficiency of both strategies

    ``residuals`` and ``utilization`` are present when the table is a model prediction.
    """
    table: pd.DataFrame
    residuals: pd.DataFrame = None
    utilization: pd.DataFrame = None

    def __len__(self):
        return len(self.table)


def wide_table(long):
    """Long method/n table to one row per n

    Repeated-run predictions also carry ``<method>_elapsed_min_s`` and ``<method>_elapsed_max_s``.
    """
    spread = 'elapsed_min_s' in long.columns
    frames = []
    for method in config.methods:
        rows = long[long['method'] == method].set_index('n').sort_index()
        columns = {f'{method}_elapsed_s': rows['elapsed_s'],
                   f'{method}_speedup': rows['speedup'],
                   f'{method}_efficiency': rows['speedup'] / rows.index}
        if spread:
            columns[f'{method}_elapsed_min_s'] = rows['elapsed_min_s']
            columns[f'{method}_elapsed_max_s'] = rows['elapsed_max_s']
        frames.append(pd.DataFrame(columns))
    table = pd.concat(frames, axis=1)
    table.index.name = 'n'
    return table.reset_index()


def build_report(reference, predicted=None, utilization=None, residuals=None):
    """Report on the reference itself, or on a prediction compared against the reference"""
    source = reference if predicted is None else predicted
    if len(source) == 0:
        raise InputError('build_report', 'nothing to report')
    table = wide_table(source)
    if utilization is not None:
        table = table.merge(utilization, on='n', how='left')
    return Report(table=table, residuals=residuals, utilization=utilization)


def write_report(report, out_dir):
    """Write report.csv (and residuals.csv when present); returns the paths written"""
    paths = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, 'report.csv')
        report.table.to_csv(path, index=False, lineterminator='\n')
        paths.append(path)
        if report.residuals is not None:
            path = os.path.join(out_dir, 'residuals.csv')
            report.residuals.to_csv(path, index=False, lineterminator='\n')
            paths.append(path)
    except OSError as err:
        raise IoError('write_report', f'cannot write to {out_dir}: {err.strerror or err}') from err
    return paths


def _series(report, quantity):
    frame = pd.DataFrame({'n': report.table['n']})
    for method in config.methods:
        frame[method] = report.table[f'{method}_{quantity}']
    return frame


def _band(report, scale=1.0):
    """Min and max elapsed per method as extra columns, or None for single-run tables"""
    if f'{config.methods[0]}_elapsed_min_s' not in report.table.columns:
        return None
    frame = pd.DataFrame({'n': report.table['n']})
    for method in config.methods:
        frame[f'{method}_min'] = report.table[f'{method}_elapsed_min_s'] / scale
        frame[f'{method}_max'] = report.table[f'{method}_elapsed_max_s'] / scale
    return frame


def _line_chart(frame, ylabel, title, band=None):
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(1, 1, 1)
    for method in config.methods:
        line, = ax.plot(frame['n'], frame[method], marker=_markers[method], label=_labels[method])
        if band is not None:
            ax.fill_between(band['n'], band[f'{method}_min'], band[f'{method}_max'], color=line.get_color(),
                            alpha=0.2, linewidth=0)
    ax.set_xlabel('Number of GPUs', fontsize=12)
    ax.set_ylabel(ylabel, fontsize=12)
    ax.set_title(title, fontsize=12)
    ax.legend(loc='best')
    buffer = io.StringIO()
    with matplotlib.rc_context({'svg.hashsalt': 'MISPar', 'svg.fonttype': 'none'}):
        fig.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def emit_plot_data(report, out_path):
    """Write elapsed.csv, speedup.csv and an SVG line chart of each

    Reports on repeated runs add min and max columns to elapsed.csv and a min/max band to elapsed.svg.

    :param report: report with at least one row
    :type report: Report
    :param out_path: output directory
    :type out_path: str
    :return: paths written
    :rtype: list[str]
    """
    if report is None or len(report) == 0:
        raise InputError('emit_plot_data', 'report is empty')
    elapsed = _series(report, 'elapsed_s')
    speed = _series(report, 'speedup')
    hours = elapsed.copy()
    hours[list(config.methods)] = hours[list(config.methods)] / 3600.0
    band = _band(report)
    if band is not None:
        elapsed = elapsed.merge(band, on='n')
        band = _band(report, 3600.0)
    outputs = [('elapsed.csv', elapsed.to_csv(index=False, lineterminator='\n')),
               ('speedup.csv', speed.to_csv(index=False, lineterminator='\n')),
               ('elapsed.svg', _line_chart(hours, 'Elapsed time [h]', 'Average elapsed time per number of GPUs',
                                           band)),
               ('speedup.svg', _line_chart(speed, 'Speedup', 'Average speedup per number of GPUs'))]
    paths = []
    try:
        os.makedirs(out_path, exist_ok=True)
        for name, text in outputs:
            path = os.path.join(out_path, name)
            with open(path, 'w', newline='\n') as f:
                f.write(text)
            paths.append(path)
    except OSError as err:
        raise IoError('emit_plot_data', f'cannot write to {out_path}: {err.strerror or err}') from err
    logger.info('plot data written to %s', out_path)
    return paths


def memory_feasibility_check(arch, per_replica_batch, topo, input_shape=None):
    """Compare one replica's memory estimate against the GPU memory

    :param arch: architecture
    :type arch: archmodel.ArchDescriptor
    :param per_replica_batch: samples per GPU
    :type per_replica_batch: int
    :param topo: cluster, supplies gpu_memory_bytes
    :type topo: clustersim.ClusterTopology
    :param input_shape: input tile (Optional, Default=4x240x240x152)
    :type input_shape: TensorShape
    :rtype: Feasibility
    """
    input_shape = TensorShape(*config.deployment.tile) if input_shape is None else input_shape
    estimate = estimate_activation_memory(arch, input_shape, per_replica_batch)
    capacity = topo.gpu_memory_bytes
    return Feasibility(passed=estimate <= capacity, estimate_bytes=estimate, capacity_bytes=capacity,
                       headroom_bytes=capacity - estimate)


def tableOut(frame, lenDP=4, lenVal=14):
    """Output a table to the console with aligned columns

    e.g. "n      data_parallel_speedup  ..."

    :param frame: table to print
    :type frame: pd.DataFrame
    :param lenDP: Number of decimal places for float values (Optional, Default=4)
    :type lenDP: int
    :param lenVal: Minimum column width (Optional, Default=14)
    :type lenVal: int
    """
    widths = [max(lenVal, len(str(c)) + 2) for c in frame.columns]
    print(''.join(f'{str(c):<{w}}' for c, w in zip(frame.columns, widths)))
    for row in frame.itertuples(index=False):
        line = ''
        for value, w in zip(row, widths):
            if isinstance(value, (float, np.floating)):
                line += f'{value:<{w}.{lenDP}f}'
            else:
                line += f'{str(value):<{w}}'
        print(line.rstrip())
    print()
