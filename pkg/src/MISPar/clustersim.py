"""
Module
------
clustersim.py: Cluster topology, trial scheduling and makespan simulation

Summary
-------
Contains ClusterTopology (nodes x GPUs per node, link characteristics), the parallelism level selection
for data-parallel training, the two scheduling strategies compared here

1. data parallel - experiments run one after another, each spread over every GPU
2. experiment parallel - independent trials run concurrently on GPU groups, greedy list scheduling

and a deterministic discrete-event simulator producing elapsed time, utilisation and an event trace.

Notes
-----
Time is continuous, in seconds. At equal timestamps finish events are processed before start events, so a
trial may start on a GPU at the instant the previous trial releases it. Zero-length trials never hold their GPUs.
"""
import enum
import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from MISPar import config
from MISPar.exceptions import (InvalidCount, EmptyGrid, InfeasibleAssignment, ScheduleConflict, InvalidTime,
                               ModelError, InputError)

logger = logging.getLogger(__name__)

AUTO = 'auto'
_finish, _start, _instant = 0, 1, 2


class StrategyKind(enum.Enum):
    Sequential = 'sequential'
    SingleNodeDataParallel = 'single_node_data_parallel'
    MultiNodeDataParallel = 'multi_node_data_parallel'
    ExperimentParallel = 'experiment_parallel'


@dataclass(frozen=True)
class ClusterTopology:
    node_count: int
    gpus_per_node: int = config.v100Node.gpus_per_node
    gpu_memory_bytes: int = config.v100Node.gpu_memory_bytes
    intra_bandwidth: float = config.v100Node.intra_bandwidth
    intra_latency: float = config.v100Node.intra_latency
    inter_bandwidth: float = config.v100Node.inter_bandwidth
    inter_latency: float = config.v100Node.inter_latency

    def __post_init__(self):
        if self.node_count < 1 or self.gpus_per_node < 1:
            raise InvalidCount('ClusterTopology', f'need at least one node and one GPU per node, '
                                                  f'got {self.node_count}x{self.gpus_per_node}')
        if min(self.intra_bandwidth, self.inter_bandwidth) <= 0 or min(self.intra_latency, self.inter_latency) < 0:
            raise ModelError('ClusterTopology', 'bandwidths must be positive and latencies non-negative')
        if self.inter_bandwidth > self.intra_bandwidth:
            raise ModelError('ClusterTopology', 'inter-node bandwidth exceeds intra-node bandwidth')

    @property
    def n_gpus(self):
        return self.node_count * self.gpus_per_node

    def gpus(self):
        """All (node, slot) pairs in index order"""
        return [(node, slot) for node in range(self.node_count) for slot in range(self.gpus_per_node)]

    @classmethod
    def from_preset(cls, preset, node_count, gpus_per_node=None):
        return cls(node_count=node_count,
                   gpus_per_node=preset.gpus_per_node if gpus_per_node is None else gpus_per_node,
                   gpu_memory_bytes=preset.gpu_memory_bytes,
                   intra_bandwidth=preset.intra_bandwidth, intra_latency=preset.intra_latency,
                   inter_bandwidth=preset.inter_bandwidth, inter_latency=preset.inter_latency)


def reference_topology(n, gpus_per_node=config.v100Node.gpus_per_node, preset=config.v100Node):
    """Topology used for an n-GPU run: one node of n GPUs up to a full node, then whole nodes"""
    if n < 1 or gpus_per_node < 1:
        raise InvalidCount('reference_topology', f'invalid GPU count {n} for {gpus_per_node} per node')
    if n <= gpus_per_node:
        return ClusterTopology.from_preset(preset, 1, n)
    if n % gpus_per_node:
        raise InvalidCount('reference_topology', f'{n} GPUs do not fill whole nodes of {gpus_per_node}')
    return ClusterTopology.from_preset(preset, n // gpus_per_node, gpus_per_node)


@dataclass(frozen=True)
class TrialAssignment:
    experiment_id: int
    gpus: tuple
    start: float
    duration: float

    @property
    def finish(self):
        return self.start + self.duration


@dataclass(frozen=True)
class Schedule:
    strategy: StrategyKind
    assignments: tuple = ()

    @property
    def makespan(self):
        return max((a.finish for a in self.assignments), default=0.0)


@dataclass(frozen=True)
class Event:
    time: float
    gpus: tuple
    trial: int
    kind: str

    def line(self):
        gpus = '+'.join(f'{node}:{slot}' for node, slot in self.gpus)
        return f'{self.time!r},{gpus},{self.trial},{self.kind}'


@dataclass
class MakespanResult:
    elapsed: float
    assignments: list = field(default_factory=list)
    utilization: dict = field(default_factory=dict)
    overall_utilization: float = 0.0
    trace: list = field(default_factory=list)

    def trace_lines(self):
        return [e.line() for e in self.trace]


def select_parallelism_level(n, M):
    """Parallelism level of a data-parallel run on n GPUs with M GPUs per node

    :rtype: StrategyKind
    """
    if n < 1 or M < 1:
        raise InvalidCount('select_parallelism_level', f'n and M must be >= 1, got n={n}, M={M}')
    if n == 1:
        return StrategyKind.Sequential
    if n <= M:
        return StrategyKind.SingleNodeDataParallel
    return StrategyKind.MultiNodeDataParallel


def plan_data_parallel(specs, topo, cost):
    """Run experiments back to back, each on every GPU of the topology

    :param specs: experiments, in id order
    :type specs: list[hpgrid.ExperimentSpec]
    :param topo: cluster
    :type topo: ClusterTopology
    :param cost: duration oracle, ``cost(spec, width) -> seconds``
    :type cost: callable
    :rtype: Schedule
    """
    if not specs:
        raise EmptyGrid('plan_data_parallel', 'no experiments to schedule')
    n = topo.n_gpus
    gpus = tuple(topo.gpus())
    clock = 0.0
    assignments = []
    for spec in specs:
        duration = cost(spec, n)
        assignments.append(TrialAssignment(spec.id, gpus, clock, duration))
        clock += duration
    return Schedule(select_parallelism_level(n, topo.gpus_per_node), tuple(assignments))


def group_size(policy, n, E):
    """GPUs per trial for a policy of 'auto' or a fixed positive integer"""
    if policy == AUTO:
        return max(1, n // E)
    if isinstance(policy, bool) or not isinstance(policy, (int, np.integer)) or policy < 1:
        raise InputError('plan_experiment_parallel', f'gpus per trial must be auto or a positive integer, '
                                                     f'got {policy!r}')
    if policy > n:
        raise InfeasibleAssignment('plan_experiment_parallel', f'{policy} GPUs per trial on a {n}-GPU cluster')
    return int(policy)


def gpu_groups(topo, g):
    """Disjoint GPU groups of size g, ordered by their lowest (node, slot)

    Groups that fit in a node stay within it; larger groups take consecutive GPUs across nodes.
    """
    M = topo.gpus_per_node
    if g <= M:
        return [tuple((node, b * g + s) for s in range(g))
                for node in range(topo.node_count) for b in range(M // g)]
    flat = topo.gpus()
    return [tuple(flat[i:i + g]) for i in range(0, len(flat) - g + 1, g)]


def plan_experiment_parallel(specs, topo, cost, policy=AUTO):
    """Greedy list scheduling of independent trials in spec-id order

    Each trial takes the earliest available GPU group, ties going to the lowest (node, slot).

    :param policy: 'auto' (group size max(1, n // E)) or a fixed GPUs-per-trial count
    :rtype: Schedule
    """
    if not specs:
        raise EmptyGrid('plan_experiment_parallel', 'no experiments to schedule')
    g = group_size(policy, topo.n_gpus, len(specs))
    groups = gpu_groups(topo, g)
    free_at = [(0.0, i) for i in range(len(groups))]
    heapq.heapify(free_at)
    assignments = []
    for spec in sorted(specs, key=lambda s: s.id):
        available, i = heapq.heappop(free_at)
        duration = cost(spec, g)
        assignments.append(TrialAssignment(spec.id, groups[i], available, duration))
        heapq.heappush(free_at, (available + duration, i))
    return Schedule(StrategyKind.ExperimentParallel, tuple(assignments))


def simulate(schedule, topo):
    """Replay a schedule as start/finish events

    :raises ScheduleConflict: a GPU is claimed while busy, or lies outside the topology
    :rtype: MakespanResult
    """
    assignments = list(schedule.assignments if isinstance(schedule, Schedule) else schedule)
    known = set(topo.gpus())
    queue = []
    for a in assignments:
        if a.duration < 0 or a.start < 0:
            raise InvalidTime('simulate', f'trial {a.experiment_id} has negative start or duration')
        if not a.gpus:
            raise ScheduleConflict('simulate', f'trial {a.experiment_id} has no GPUs')
        stray = [gpu for gpu in a.gpus if tuple(gpu) not in known]
        if stray:
            raise ScheduleConflict('simulate', f'trial {a.experiment_id} uses GPU {stray[0]} outside the topology')
        finish_order = _instant if a.duration == 0 else _finish
        gpus = tuple(map(tuple, a.gpus))
        heapq.heappush(queue, (a.start, _start, a.experiment_id, gpus, a.duration == 0))
        heapq.heappush(queue, (a.finish, finish_order, a.experiment_id, gpus, False))

    busy = {}
    busy_time = {gpu: 0.0 for gpu in topo.gpus()}
    trace = []
    elapsed = 0.0
    while queue:
        time, order, trial, gpus, instant = heapq.heappop(queue)
        if order == _start:
            for gpu in gpus:
                if gpu in busy:
                    raise ScheduleConflict('simulate', f'trial {trial} starts on GPU {gpu[0]}:{gpu[1]} at '
                                                       f'{time!r} s while trial {busy[gpu]} holds it')
                if not instant:
                    busy[gpu] = trial
            trace.append(Event(time, gpus, trial, 'start'))
        else:
            for gpu in gpus:
                if busy.get(gpu) == trial:
                    del busy[gpu]
            trace.append(Event(time, gpus, trial, 'finish'))
            elapsed = max(elapsed, time)

    for a in assignments:
        for gpu in a.gpus:
            busy_time[tuple(gpu)] += a.duration
    if elapsed > 0:
        utilization = {gpu: t / elapsed for gpu, t in busy_time.items()}
        overall = sum(busy_time.values()) / (len(busy_time) * elapsed)
    else:
        utilization = {gpu: 0.0 for gpu in busy_time}
        overall = 0.0
    return MakespanResult(elapsed=elapsed, assignments=assignments, utilization=utilization,
                          overall_utilization=overall, trace=trace)


def speedup(t_base, t_n):
    """t_base / t_n"""
    if not (t_base > 0 and t_n > 0):
        raise InvalidTime('speedup', f'times must be positive, got {t_base} and {t_n}')
    return t_base / t_n


@dataclass(frozen=True)
class ElapsedSpread:
    """Elapsed time over repeated runs of one plan"""
    mean: float
    min: float
    max: float
    runs: tuple = ()


def repeat_average(planner, specs, topo, cost, repeats=3, jitter=0.0, seed=0):
    """Mean, min and max elapsed time over repeated runs with multiplicative duration noise

    Run r scales every trial duration by a factor drawn uniformly from [1 - jitter, 1 + jitter].

    :param planner: ``planner(specs, topo, cost) -> Schedule``
    :type planner: callable
    :rtype: ElapsedSpread
    """
    if isinstance(repeats, bool) or repeats < 1:
        raise InvalidCount('repeat_average', f'repeats must be >= 1, got {repeats}')
    if not 0.0 <= jitter < 1.0:
        raise InputError('repeat_average', f'jitter must be in [0, 1), got {jitter}')
    rng = np.random.default_rng(seed)
    elapsed = []
    for _ in range(repeats):
        factors = {spec.id: float(f) for spec, f in zip(specs, rng.uniform(1 - jitter, 1 + jitter, len(specs)))}

        def noisy(spec, width, factors=factors):
            return cost(spec, width) * factors[spec.id]

        elapsed.append(simulate(planner(specs, topo, noisy), topo).elapsed)
    logger.debug('repeated %d runs: %s', repeats, elapsed)
    return ElapsedSpread(mean=float(np.mean(elapsed)), min=min(elapsed), max=max(elapsed), runs=tuple(elapsed))
