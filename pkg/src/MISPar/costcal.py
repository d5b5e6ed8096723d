"""
Module
------
costcal.py: Trial duration model and its calibration

Summary
-------
Analytic time model for one trial: steps per epoch from the global batch, a compute time per step and a
ring all-reduce per step, scaled by a per-experiment heterogeneity multiplier. predict_table replays both
scheduling strategies over the reference GPU counts; calibrate fits the model's free scalars to a
reference speedup table.

Notes
-----
All-reduce over p participants on one link class costs 2(p-1) hop latencies plus 2(p-1)/p of the gradient
volume over the link bandwidth, plus a fixed synchronisation overhead. Runs spanning nodes do an intra-node
ring of M GPUs followed by an inter-node ring over the k nodes. The hop latency is the fitted per-hop term
alone; the topology contributes M and nothing else, its link latency being folded into the fit.

The calibration objective is the sum of squared relative speedup residuals. Search: seeded random points
around the prior, coordinate refinement with shrinking windows, then an optional Nelder-Mead polish.
"""
import logging
import math
from dataclasses import dataclass, field, fields
from functools import cached_property, lru_cache
from numbers import Real

import numpy as np
import pandas as pd
from scipy import optimize

from MISPar import config
from MISPar.archmodel import trainable_params
from MISPar.clustersim import (reference_topology, plan_data_parallel, plan_experiment_parallel, AUTO,
                               simulate, repeat_average)
from MISPar.exceptions import ModelError, InvalidCount, InputError
from MISPar.hpgrid import default_specs

logger = logging.getLogger(__name__)

DATA, EXPERIMENT = config.methods
_referenceColumns = ('method', 'n', 'elapsed_s', 'speedup')


@lru_cache(maxsize=None)
def default_gradient_bytes():
    """4 bytes per trainable parameter of the default network"""
    return 4 * trainable_params()


@dataclass(frozen=True)
class CostParams:
    """Free parameters of the trial duration model

    Times in seconds, bandwidths in bytes/s. ``heterogeneity`` is either the max/mean factor h in [1, 2),
    expanded to multipliers rising linearly with experiment id from 2 - h to h, or an explicit list of
    ``grid_size`` multipliers with mean 1. ``grad_bytes`` of None means 4 bytes per trainable parameter of
    the default network.
    """
    t_step_base: float
    beta_intra: float = config.v100Node.intra_bandwidth
    beta_inter: float = config.v100Node.inter_bandwidth
    sync_overhead_intra: float = 0.0
    sync_overhead_inter: float = 0.0
    hop_latency_intra: float = 0.0
    hop_latency_inter: float = 0.0
    grid_size: int = config.calibrationPrior.grid_size
    heterogeneity: object = 1.0
    epochs: int = config.deployment.epochs
    samples_train: int = config.samplesTrain
    grad_bytes: int = None

    def __post_init__(self):
        if not isinstance(self.heterogeneity, Real):
            object.__setattr__(self, 'heterogeneity', tuple(float(m) for m in self.heterogeneity))

    @cached_property
    def multipliers(self):
        E = self.grid_size
        if isinstance(self.heterogeneity, tuple):
            values = np.asarray(self.heterogeneity, dtype=np.float64)
            if len(values) != E:
                raise ModelError('CostParams', f'{len(values)} heterogeneity multipliers for {E} experiments')
            if values.min() <= 0 or abs(values.mean() - 1.0) > 1e-9:
                raise ModelError('CostParams', 'heterogeneity multipliers must be positive with mean 1')
            return values
        h = float(self.heterogeneity)
        if not 1.0 <= h < 2.0:
            raise ModelError('CostParams', f'heterogeneity factor must be in [1, 2), got {h}')
        if E == 1:
            return np.ones(1)
        return np.linspace(2.0 - h, h, E)

    @cached_property
    def gradient_bytes(self):
        return default_gradient_bytes() if self.grad_bytes is None else int(self.grad_bytes)

    def validate(self, operation='CostParams'):
        if not self.t_step_base > 0:
            raise ModelError(operation, f't_step_base must be positive, got {self.t_step_base}')
        if not (self.beta_intra > 0 and self.beta_inter > 0):
            raise ModelError(operation, 'all-reduce bandwidths must be positive')
        for name in ('sync_overhead_intra', 'sync_overhead_inter', 'hop_latency_intra', 'hop_latency_inter'):
            if getattr(self, name) < 0:
                raise ModelError(operation, f'{name} must be >= 0')
        if isinstance(self.grid_size, bool) or self.grid_size < 1:
            raise ModelError(operation, f'grid size must be >= 1, got {self.grid_size}')
        if self.epochs < 1 or self.samples_train < 1:
            raise ModelError(operation, 'epochs and samples_train must be >= 1')
        if self.grad_bytes is not None and self.grad_bytes < 0:
            raise ModelError(operation, 'grad_bytes must be >= 0')
        try:
            self.multipliers
        except ModelError as err:
            raise ModelError(operation, err.message) from None
        return self

    def to_dict(self):
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = [float(v) for v in value]
            elif isinstance(value, (np.floating, np.integer)):
                value = value.item()
            data[f.name] = value
        return data

    @classmethod
    def from_dict(cls, data, operation='CostParams'):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ModelError(operation, f'unknown cost parameter(s): {", ".join(unknown)}')
        if 't_step_base' not in data:
            raise ModelError(operation, 't_step_base is required')
        return cls(**data)


@dataclass
class CalibrationResult:
    params: CostParams
    residuals: pd.DataFrame
    objective: float
    trace: dict = field(default_factory=dict)


def default_cost_params(**overrides):
    """Cost parameters at the calibration prior"""
    prior = config.calibrationPrior
    t = config.priorStepTime
    values = dict(t_step_base=t, beta_intra=10 ** prior.log_beta_intra, beta_inter=10 ** prior.log_beta_inter,
                  sync_overhead_intra=prior.sync_overhead_intra * t, sync_overhead_inter=prior.sync_overhead_inter * t,
                  hop_latency_intra=prior.hop_latency_intra * t, hop_latency_inter=prior.hop_latency_inter * t,
                  grid_size=prior.grid_size, heterogeneity=prior.heterogeneity)
    values.update(overrides)
    return CostParams(**values)


def ring_time(participants, bandwidth, hop_latency, grad_bytes):
    """Ring all-reduce: 2(p-1) hop latencies plus 2(p-1)/p of the volume over the bandwidth"""
    if participants <= 1:
        return 0.0
    p = participants
    return 2 * (p - 1) * hop_latency + 2 * (p - 1) / p * grad_bytes / bandwidth


def allreduce_time(params, n, topo, grad_bytes=None):
    """Per-step gradient synchronisation time on n GPUs

    :param params: model parameters
    :type params: CostParams
    :param n: GPUs taking part
    :type n: int
    :param topo: cluster; supplies M
    :type topo: clustersim.ClusterTopology
    :param grad_bytes: gradient volume (Optional, Default=params.gradient_bytes)
    :type grad_bytes: int
    :rtype: float
    """
    if n < 1:
        raise InvalidCount('allreduce_time', f'n must be >= 1, got {n}')
    if n == 1:
        return 0.0
    volume = params.gradient_bytes if grad_bytes is None else grad_bytes
    M = topo.gpus_per_node
    if n <= M:
        return ring_time(n, params.beta_intra, params.hop_latency_intra, volume) + params.sync_overhead_intra
    k = math.ceil(n / M)
    return (ring_time(M, params.beta_intra, params.hop_latency_intra, volume) + params.sync_overhead_intra
            + ring_time(k, params.beta_inter, params.hop_latency_inter, volume) + params.sync_overhead_inter)


def steps_per_epoch(samples_train, per_replica_batch, n):
    return -(-samples_train // (per_replica_batch * n))


def _unit_duration(params, per_replica_batch, epochs, n, topo, grad_bytes=None):
    step = params.t_step_base * per_replica_batch / 2
    return (epochs * steps_per_epoch(params.samples_train, per_replica_batch, n)
            * (step + allreduce_time(params, n, topo, grad_bytes)))


def trial_duration(params, spec, n, topo, grad_bytes=None):
    """Seconds to train one experiment on n GPUs

    epochs * ceil(samples_train / (per_replica_batch * n)) * (step time + all-reduce) * multiplier[spec.id]
    """
    params.validate('trial_duration')
    if n < 1:
        raise InvalidCount('trial_duration', f'width must be >= 1, got {n}')
    if not 0 <= spec.id < params.grid_size:
        raise ModelError('trial_duration', f'experiment {spec.id} outside a grid of {params.grid_size}')
    return (_unit_duration(params, spec.per_replica_batch, spec.epochs, n, topo, grad_bytes)
            * params.multipliers[spec.id])


def duration_oracle(params, topo, grad_bytes=None):
    """trial_duration as a ``cost(spec, width)`` callable, memoised per (batch, epochs, width)"""
    params.validate('duration_oracle')
    multipliers = params.multipliers
    memo = {}

    def cost(spec, width):
        key = (spec.per_replica_batch, spec.epochs, width)
        if key not in memo:
            memo[key] = _unit_duration(params, spec.per_replica_batch, spec.epochs, width, topo, grad_bytes)
        return memo[key] * multipliers[spec.id]

    return cost


def _predict(params, ns, gpus_per_node, policy, grad_bytes=None):
    """Makespans per method, in the order of ns"""
    specs = default_specs(params.grid_size, epochs=params.epochs)
    elapsed = {DATA: [], EXPERIMENT: []}
    for n in ns:
        topo = reference_topology(n, gpus_per_node)
        cost = duration_oracle(params, topo, grad_bytes)
        elapsed[DATA].append(plan_data_parallel(specs, topo, cost).makespan)
        elapsed[EXPERIMENT].append(plan_experiment_parallel(specs, topo, cost, policy).makespan)
    return {m: np.asarray(v) for m, v in elapsed.items()}


def _predict_repeated(params, ns, gpus_per_node, policy, grad_bytes, repeats, jitter, seed):
    """ElapsedSpread per method and n, in the order of ns"""
    specs = default_specs(params.grid_size, epochs=params.epochs)
    planners = {DATA: plan_data_parallel,
                EXPERIMENT: lambda s, t, c: plan_experiment_parallel(s, t, c, policy)}
    spread = {DATA: [], EXPERIMENT: []}
    for n in ns:
        topo = reference_topology(n, gpus_per_node)
        cost = duration_oracle(params, topo, grad_bytes)
        for method, planner in planners.items():
            spread[method].append(repeat_average(planner, specs, topo, cost, repeats, jitter, seed))
    return spread


def predict_table(params, ns=config.referenceGpuCounts, gpus_per_node=config.v100Node.gpus_per_node,
                  policy=AUTO, grad_bytes=None, repeats=1, jitter=0.0, seed=0):
    """Predicted elapsed time and speedup per method and GPU count

    Speedups are normalised to each method's own n=1 entry. With ``repeats`` > 1 or a non-zero ``jitter``
    every entry is the mean of repeated noisy runs and the table gains elapsed_min_s and elapsed_max_s.

    :param repeats: runs per entry (Optional, Default=1)
    :type repeats: int
    :param jitter: relative duration noise per run, in [0, 1) (Optional, Default=0)
    :type jitter: float
    :return: long table with columns method, n, elapsed_s, speedup
    :rtype: pd.DataFrame
    """
    ns = [int(n) for n in ns]
    if 1 not in ns:
        raise InputError('predict_table', 'GPU counts must include the n=1 baseline')
    params.validate('predict_table')
    base = ns.index(1)
    columns = list(_referenceColumns)
    rows = []
    if repeats == 1 and jitter == 0:
        elapsed = _predict(params, ns, gpus_per_node, policy, grad_bytes)
        for method in config.methods:
            for n, t in zip(ns, elapsed[method]):
                rows.append({'method': method, 'n': n, 'elapsed_s': float(t),
                             'speedup': float(elapsed[method][base] / t)})
    else:
        spread = _predict_repeated(params, ns, gpus_per_node, policy, grad_bytes, repeats, jitter, seed)
        columns += ['elapsed_min_s', 'elapsed_max_s']
        for method in config.methods:
            for n, s in zip(ns, spread[method]):
                rows.append({'method': method, 'n': n, 'elapsed_s': s.mean,
                             'speedup': spread[method][base].mean / s.mean,
                             'elapsed_min_s': s.min, 'elapsed_max_s': s.max})
    return pd.DataFrame(rows, columns=columns)


def utilization_table(params, ns=config.referenceGpuCounts, gpus_per_node=config.v100Node.gpus_per_node,
                      policy=AUTO, grad_bytes=None):
    """Overall GPU utilisation of the simulated experiment-parallel schedule per n"""
    specs = default_specs(params.grid_size, epochs=params.epochs)
    rows = []
    for n in ns:
        topo = reference_topology(n, gpus_per_node)
        schedule = plan_experiment_parallel(specs, topo, duration_oracle(params, topo, grad_bytes), policy)
        rows.append({'n': n, 'experiment_parallel_utilization': simulate(schedule, topo).overall_utilization})
    return pd.DataFrame(rows)


def check_reference(reference):
    """Validate a reference table and return (ns, speedups per method, data-parallel n=1 elapsed)"""
    if not isinstance(reference, pd.DataFrame) or any(c not in reference.columns for c in _referenceColumns):
        raise InputError('calibrate', f'reference needs columns {", ".join(_referenceColumns)}')
    ns = None
    speedups = {}
    for method in config.methods:
        rows = reference[reference['method'] == method].sort_values('n')
        if rows.empty:
            raise InputError('calibrate', f'reference has no {method} rows')
        method_ns = [int(n) for n in rows['n']]
        if len(set(method_ns)) != len(method_ns) or 1 not in method_ns:
            raise InputError('calibrate', f'{method} rows need distinct GPU counts including n=1')
        if ns is not None and method_ns != ns:
            raise InputError('calibrate', 'both methods must cover the same GPU counts')
        values = rows[['elapsed_s', 'speedup']].to_numpy(dtype=np.float64)
        if not np.all(np.isfinite(values)) or values.min() <= 0:
            raise InputError('calibrate', f'{method} elapsed times and speedups must be positive')
        ns = method_ns
        speedups[method] = rows['speedup'].to_numpy(dtype=np.float64)
    extra = set(reference['method']) - set(config.methods)
    if extra:
        raise InputError('calibrate', f'unknown method(s) in reference: {", ".join(sorted(map(str, extra)))}')
    data = reference[(reference['method'] == DATA) & (reference['n'] == 1)]
    return ns, speedups, float(data['elapsed_s'].iloc[0])


class _Objective:
    """Squared relative speedup residuals for calibration vectors, memoised"""

    def __init__(self, ns, speedups, base_elapsed, gpus_per_node, policy, epochs, samples_train, grad_bytes,
                 penalty):
        self.ns = ns
        self.reference = np.concatenate([speedups[DATA], speedups[EXPERIMENT]])
        self.order = np.sign(speedups[EXPERIMENT] - speedups[DATA])
        self.base_elapsed = base_elapsed
        self.gpus_per_node = gpus_per_node
        self.policy = policy
        self.epochs = epochs
        self.samples_train = samples_train
        self.grad_bytes = grad_bytes
        self.penalty = penalty
        self.base = ns.index(1)
        self.memo = {}

    def params(self, vector):
        v = config.CalibrationVector(*vector)
        E = int(round(v.grid_size))
        steps = steps_per_epoch(self.samples_train, config.deployment.per_replica_batch, 1)
        t = self.base_elapsed / (E * self.epochs * steps)
        return CostParams(t_step_base=t, beta_intra=10 ** v.log_beta_intra, beta_inter=10 ** v.log_beta_inter,
                          sync_overhead_intra=v.sync_overhead_intra * t, sync_overhead_inter=v.sync_overhead_inter * t,
                          hop_latency_intra=v.hop_latency_intra * t, hop_latency_inter=v.hop_latency_inter * t,
                          grid_size=E, heterogeneity=float(v.heterogeneity), epochs=self.epochs,
                          samples_train=self.samples_train, grad_bytes=self.grad_bytes)

    def __call__(self, vector):
        key = tuple(float(x) for x in vector)
        if key not in self.memo:
            self.memo[key] = self._evaluate(key)
        return self.memo[key]

    def _evaluate(self, vector):
        try:
            params = self.params(vector).validate('calibrate')
        except ModelError:
            return self.penalty
        elapsed = _predict(params, self.ns, self.gpus_per_node, self.policy, self.grad_bytes)
        speed = {m: elapsed[m][self.base] / elapsed[m] for m in elapsed}
        predicted = np.concatenate([speed[DATA], speed[EXPERIMENT]])
        value = float(np.sum(((predicted - self.reference) / self.reference) ** 2))
        sign = np.sign(speed[EXPERIMENT] - speed[DATA])
        strict = (self.order != 0) & (np.asarray(self.ns) >= 2)
        if np.any(sign[strict] != self.order[strict]):
            value += self.penalty
        return value


def _better(candidate, incumbent):
    """Strictly lower objective, ties going to the lexicographically smaller vector"""
    return (candidate[0], tuple(candidate[1])) < (incumbent[0], tuple(incumbent[1]))


def _random_vector(rng, bounds):
    lo, hi = bounds.grid_size
    vector = [float(rng.integers(lo, hi + 1))]
    for lo, hi in bounds[1:]:
        vector.append(float(rng.uniform(lo, hi)))
    return vector


def _axis_candidates(vector, j, bounds, settings, round_):
    lo, hi = bounds[j]
    width = settings.window * (hi - lo) * 0.5 ** round_
    values = np.clip(vector[j] + np.linspace(-width, width, settings.points_per_axis), lo, hi)
    if j == 0:
        values = set(int(round(v)) for v in values) | {int(vector[0]) - 1, int(vector[0]) + 1}
        values = [float(v) for v in sorted(values) if lo <= v <= hi]
    out = []
    for value in values:
        candidate = list(vector)
        candidate[j] = float(value)
        out.append(candidate)
    return out


def calibrate(reference, bounds=config.searchBounds, seed=0, settings=config.searchSettings,
              prior=config.calibrationPrior, gpus_per_node=config.v100Node.gpus_per_node, policy=AUTO,
              epochs=config.deployment.epochs, samples_train=config.samplesTrain, grad_bytes=None):
    """Fit the cost model to a reference speedup table

    :param reference: long table with columns method, n, elapsed_s, speedup
    :type reference: pd.DataFrame
    :param bounds: search bounds per calibration scalar
    :type bounds: config.CalibrationVector
    :param seed: random seed of the first search stage
    :type seed: int
    :param settings: search effort
    :type settings: config.SearchSettings
    :param prior: starting point, always evaluated
    :type prior: config.CalibrationVector
    :return: fitted parameters, residuals and objective
    :rtype: CalibrationResult
    """
    ns, speedups, base_elapsed = check_reference(reference)
    for n in ns:
        reference_topology(n, gpus_per_node)
    objective = _Objective(ns, speedups, base_elapsed, gpus_per_node, policy, epochs, samples_train, grad_bytes,
                           settings.penalty)

    # stage 1: prior plus seeded random points
    rng = np.random.default_rng(seed)
    start = [float(x) for x in prior]
    best = (objective(start), start)
    for _ in range(settings.random_points):
        vector = _random_vector(rng, bounds)
        candidate = (objective(vector), vector)
        if _better(candidate, best):
            best = candidate
    stages = {'random': best[0]}
    logger.debug('random stage best %.6g at %s', best[0], best[1])

    # stage 2: coordinate refinement with shrinking windows
    for round_ in range(settings.rounds):
        for j in range(len(bounds)):
            for vector in _axis_candidates(best[1], j, bounds, settings, round_):
                candidate = (objective(vector), vector)
                if _better(candidate, best):
                    best = candidate
        logger.debug('refinement round %d objective %.6g', round_, best[0])
    stages['refine'] = best[0]

    # stage 3: continuous polish at the fitted grid size
    if settings.polish:
        grid_size = best[1][0]
        box = np.asarray(bounds[1:], dtype=np.float64)

        def polish_objective(x):
            overshoot = float(np.sum(np.maximum(box[:, 0] - x, 0) + np.maximum(x - box[:, 1], 0)))
            if overshoot > 0:
                return settings.penalty + overshoot
            return objective([grid_size] + [float(v) for v in x])

        result = optimize.minimize(polish_objective, np.asarray(best[1][1:]), method='Nelder-Mead',
                                   options={'maxiter': settings.polish_iterations, 'xatol': 1e-9, 'fatol': 1e-14})
        vector = [grid_size] + [float(v) for v in np.clip(result.x, box[:, 0], box[:, 1])]
        candidate = (objective(vector), vector)
        if candidate[0] < best[0]:
            best = candidate
        stages['polish'] = best[0]

    params = objective.params(best[1])
    predicted = predict_table(params, ns, gpus_per_node, policy, grad_bytes)
    residuals = residual_table(predicted, reference)
    value = float(np.sum(residuals['residual'].to_numpy() ** 2))
    trace = {'evaluations': len(objective.memo), 'stage_objectives': stages,
             'vector': dict(zip(config.CalibrationVector._fields, best[1]))}
    logger.info('calibrated E=%d h=%.4f objective %.6g after %d evaluations',
                params.grid_size, params.heterogeneity, value, len(objective.memo))
    return CalibrationResult(params=params, residuals=residuals, objective=value, trace=trace)


def residual_table(predicted, reference):
    merged = predicted.merge(reference[list(_referenceColumns)], on=['method', 'n'], suffixes=('', '_reference'))
    merged = merged.rename(columns={'speedup': 'predicted_speedup', 'speedup_reference': 'reference_speedup',
                                    'elapsed_s': 'predicted_elapsed_s', 'elapsed_s_reference': 'reference_elapsed_s'})
    merged['residual'] = (merged['predicted_speedup'] - merged['reference_speedup']) / merged['reference_speedup']
    order = {m: i for i, m in enumerate(config.methods)}
    merged = merged.sort_values(['method', 'n'], key=lambda s: s.map(order) if s.name == 'method' else s)
    return merged[['method', 'n', 'reference_elapsed_s', 'predicted_elapsed_s', 'reference_speedup',
                   'predicted_speedup', 'residual']].reset_index(drop=True)
