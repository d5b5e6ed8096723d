from unittest import TestCase

import numpy as np

from MISPar.clustersim import (ClusterTopology, StrategyKind, TrialAssignment, Schedule, reference_topology,
                               select_parallelism_level, plan_data_parallel, plan_experiment_parallel, group_size,
                               gpu_groups, simulate, speedup, repeat_average, AUTO)
from MISPar.exceptions import (InvalidCount, EmptyGrid, InfeasibleAssignment, ScheduleConflict, InvalidTime,
                               ModelError, InputError)
from MISPar.hpgrid import default_specs
from MISPar.utilities import parse_hms


def fixed_cost(durations):
    return lambda spec, width: float(durations[spec.id])


def greedy_oracle(durations, n, k):
    """Brute-force re-enactment: k-GPU groups in flat order, each trial onto the first earliest-free group"""
    free = [0.0] * (n // k)
    for d in durations:
        i = min(range(len(free)), key=lambda j: (free[j], j))
        free[i] += d
    return max(free)


class TestTopology(TestCase):

    def test_cluster_topology(self):
        topo = ClusterTopology(node_count=2)
        self.assertEqual(topo.n_gpus, 8)
        self.assertEqual(topo.gpus()[4], (1, 0))
        with self.assertRaises(InvalidCount):
            ClusterTopology(node_count=0)
        with self.assertRaises(ModelError):
            ClusterTopology(node_count=1, intra_bandwidth=1e9, inter_bandwidth=1e10)

    def test_reference_topology(self):
        self.assertEqual((reference_topology(2).node_count, reference_topology(2).gpus_per_node), (1, 2))
        self.assertEqual((reference_topology(12).node_count, reference_topology(12).gpus_per_node), (3, 4))
        with self.assertRaises(InvalidCount):
            reference_topology(6)

    def test_select_parallelism_level(self):
        self.assertEqual(select_parallelism_level(1, 4), StrategyKind.Sequential)
        self.assertEqual(select_parallelism_level(4, 4), StrategyKind.SingleNodeDataParallel)
        self.assertEqual(select_parallelism_level(32, 4), StrategyKind.MultiNodeDataParallel)
        with self.assertRaises(InvalidCount):
            select_parallelism_level(0, 4)


class TestPlanning(TestCase):

    def test_plan_data_parallel(self):
        topo = ClusterTopology(node_count=1)
        schedule = plan_data_parallel(default_specs(3), topo, fixed_cost([5, 7, 11]))
        self.assertEqual(schedule.makespan, 23)
        self.assertEqual([a.start for a in schedule.assignments], [0, 5, 12])
        self.assertEqual(schedule.strategy, StrategyKind.SingleNodeDataParallel)
        self.assertTrue(all(len(a.gpus) == 4 for a in schedule.assignments))
        self.assertEqual(plan_data_parallel(default_specs(3), topo, fixed_cost([10] * 3)).makespan, 30)
        with self.assertRaises(EmptyGrid):
            plan_data_parallel([], topo, fixed_cost([]))

    def test_plan_experiment_parallel(self):
        four = ClusterTopology(node_count=1, gpus_per_node=4)
        two = ClusterTopology(node_count=1, gpus_per_node=2)
        self.assertEqual(plan_experiment_parallel(default_specs(4), four, fixed_cost([10] * 4), 1).makespan, 10)
        self.assertEqual(plan_experiment_parallel(default_specs(4), two, fixed_cost([10] * 4), 1).makespan, 20)
        schedule = plan_experiment_parallel(default_specs(3), two, fixed_cost([10, 6, 5]), 1)
        self.assertEqual(schedule.makespan, 11)
        self.assertEqual([a.gpus for a in schedule.assignments], [((0, 0),), ((0, 1),), ((0, 1),)])
        with self.assertRaises(InfeasibleAssignment):
            plan_experiment_parallel(default_specs(3), two, fixed_cost([1] * 3), 3)
        with self.assertRaises(EmptyGrid):
            plan_experiment_parallel([], two, fixed_cost([]))

    def test_group_size(self):
        self.assertEqual(group_size(AUTO, 32, 8), 4)
        self.assertEqual(group_size(AUTO, 4, 26), 1)
        self.assertEqual(group_size(2, 4, 26), 2)
        with self.assertRaises(InputError):
            group_size('many', 4, 2)

    def test_gpu_groups(self):
        topo = ClusterTopology(node_count=2)
        self.assertEqual(gpu_groups(topo, 2)[1], ((0, 2), (0, 3)))
        self.assertEqual(gpu_groups(topo, 8), [tuple(topo.gpus())])
        self.assertTrue(all(len({node for node, _ in g}) == 1 for g in gpu_groups(topo, 4)))

    def test_single_gpu_strategies_agree(self):
        topo = ClusterTopology(node_count=1, gpus_per_node=1)
        cost = fixed_cost([3, 1, 4, 1, 5])
        specs = default_specs(5)
        self.assertEqual(plan_data_parallel(specs, topo, cost).makespan,
                         plan_experiment_parallel(specs, topo, cost).makespan)


class TestSimulate(TestCase):

    def test_simulate(self):
        topo = ClusterTopology(node_count=1)
        result = simulate(plan_data_parallel(default_specs(3), topo, fixed_cost([5, 7, 11])), topo)
        self.assertEqual(result.elapsed, 23)
        self.assertEqual(len(result.trace), 6)
        self.assertEqual(result.trace_lines()[0], '0.0,0:0+0:1+0:2+0:3,0,start')
        self.assertEqual([e.kind for e in result.trace[1:3]], ['finish', 'start'])
        self.assertAlmostEqual(result.overall_utilization, 1.0)

    def test_empty_schedule(self):
        result = simulate(Schedule(StrategyKind.ExperimentParallel), ClusterTopology(node_count=1))
        self.assertEqual(result.elapsed, 0)
        self.assertEqual(result.trace, [])

    def test_deterministic(self):
        topo = ClusterTopology(node_count=2)
        schedule = plan_experiment_parallel(default_specs(11), topo, fixed_cost(range(1, 12)), 1)
        self.assertEqual(simulate(schedule, topo).trace_lines(), simulate(schedule, topo).trace_lines())

    def test_conflict(self):
        topo = ClusterTopology(node_count=1)
        clash = [TrialAssignment(0, ((0, 0),), 0.0, 10.0), TrialAssignment(1, ((0, 0), (0, 1)), 5.0, 1.0)]
        with self.assertRaises(ScheduleConflict):
            simulate(clash, topo)
        with self.assertRaises(ScheduleConflict):
            simulate([TrialAssignment(0, ((3, 0),), 0.0, 1.0)], topo)
        with self.assertRaises(InvalidTime):
            simulate([TrialAssignment(0, ((0, 0),), 0.0, -1.0)], topo)

    def test_back_to_back_and_zero_length(self):
        topo = ClusterTopology(node_count=1, gpus_per_node=1)
        gpu = ((0, 0),)
        result = simulate([TrialAssignment(0, gpu, 0.0, 2.0), TrialAssignment(1, gpu, 2.0, 0.0),
                           TrialAssignment(2, gpu, 2.0, 3.0)], topo)
        self.assertEqual(result.elapsed, 5.0)

    def test_work_conservation(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            topo = ClusterTopology(node_count=int(rng.integers(1, 3)), gpus_per_node=4)
            durations = rng.uniform(1, 50, int(rng.integers(1, 12)))
            schedule = plan_experiment_parallel(default_specs(len(durations)), topo, fixed_cost(durations),
                                                int(rng.choice([1, 2, 4])))
            result = simulate(schedule, topo)
            work = sum(a.duration * len(a.gpus) for a in schedule.assignments)
            self.assertLessEqual(work, topo.n_gpus * result.elapsed + 1e-9)
            self.assertGreaterEqual(result.elapsed, max(durations))
            self.assertTrue(all(0.0 <= u <= 1.0 + 1e-12 for u in result.utilization.values()))

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            M = int(rng.choice([1, 2, 4]))
            nodes = int(rng.integers(1, 4 // M + 1))
            topo = ClusterTopology(node_count=nodes, gpus_per_node=M)
            k = int(rng.choice([d for d in (1, 2, 4) if d <= M]))
            durations = [float(d) for d in rng.integers(1, 30, int(rng.integers(1, 7)))]
            schedule = plan_experiment_parallel(default_specs(len(durations)), topo, fixed_cost(durations), k)
            self.assertEqual(simulate(schedule, topo).elapsed, greedy_oracle(durations, topo.n_gpus, k))


class TestSpeedup(TestCase):

    def test_speedup(self):
        self.assertAlmostEqual(speedup(parse_hms('44:18:02'), parse_hms('7:41:12')), 5.76, delta=0.01)
        self.assertAlmostEqual(speedup(parse_hms('44:20:19'), parse_hms('2:55:06')), 15.19, delta=0.01)
        self.assertAlmostEqual(speedup(parse_hms('44:18:02'), parse_hms('3:21:44')), 13.18, delta=0.01)
        self.assertEqual(speedup(7.0, 7.0), 1.0)
        with self.assertRaises(InvalidTime):
            speedup(0.0, 1.0)

    def test_repeat_average(self):
        topo = ClusterTopology(node_count=1)
        specs = default_specs(4)
        cost = fixed_cost([10] * 4)
        steady = repeat_average(plan_data_parallel, specs, topo, cost)
        self.assertEqual((steady.mean, steady.min, steady.max), (40.0, 40.0, 40.0))
        self.assertEqual(steady.runs, (40.0, 40.0, 40.0))
        noisy = repeat_average(plan_data_parallel, specs, topo, cost, repeats=5, jitter=0.1, seed=1)
        self.assertEqual(len(noisy.runs), 5)
        self.assertTrue(36.0 <= noisy.min <= noisy.mean <= noisy.max <= 44.0)
        self.assertLess(noisy.min, noisy.max)
        self.assertEqual(repeat_average(plan_data_parallel, specs, topo, cost, repeats=5, jitter=0.1, seed=1), noisy)
        with self.assertRaises(InvalidCount):
            repeat_average(plan_data_parallel, specs, topo, cost, repeats=0)
