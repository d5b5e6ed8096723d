"""
module
------
config.py

summary
-------
Configuration and global data for package. Deployment constants of the reference cluster, the calibration
starting point and search bounds, and file format constants.
"""
import collections
import math
from decimal import Decimal

Deployment = collections.namedtuple('Deployment', 'per_replica_batch base_lr epochs epsilon ratios tile crop_depth')

deployment = Deployment(per_replica_batch=2, base_lr=Decimal('1e-4'), epochs=250, epsilon=0.1,
                        ratios=(0.70, 0.15, 0.15), tile=(4, 240, 240, 152), crop_depth=152)

TopologyPreset = collections.namedtuple('TopologyPreset', 'name gpus_per_node gpu_memory_bytes '
                                                          'intra_bandwidth intra_latency '
                                                          'inter_bandwidth inter_latency')

# 4 x 16 GiB GPUs per node, NVLink within a node, InfiniBand between nodes
v100Node = TopologyPreset(name='v100x4', gpus_per_node=4, gpu_memory_bytes=16 * 2 ** 30,
                          intra_bandwidth=150e9, intra_latency=2e-6,
                          inter_bandwidth=12.5e9, inter_latency=5e-6)


# Global variables
referenceGpuCounts = (1, 2, 4, 8, 12, 16, 32)
referenceSamples = 484
samplesTrain = 338
referenceParamTotal = 406793
methods = ('data_parallel', 'experiment_parallel')

# Calibration vector, in search order. Overheads are fractions of the base step time, bandwidths log10(B/s).
CalibrationVector = collections.namedtuple('CalibrationVector', 'grid_size heterogeneity '
                                                                'hop_latency_intra hop_latency_inter '
                                                                'sync_overhead_intra sync_overhead_inter '
                                                                'log_beta_intra log_beta_inter')

calibrationPrior = CalibrationVector(grid_size=26, heterogeneity=1.71,
                                     hop_latency_intra=0.045, hop_latency_inter=0.058,
                                     sync_overhead_intra=0.0, sync_overhead_inter=0.0,
                                     log_beta_intra=math.log10(150e9), log_beta_inter=math.log10(12.5e9))

searchBounds = CalibrationVector(grid_size=(4, 64), heterogeneity=(1.0, 1.95),
                                 hop_latency_intra=(0.0, 0.2), hop_latency_inter=(0.0, 0.2),
                                 sync_overhead_intra=(0.0, 0.5), sync_overhead_inter=(0.0, 0.5),
                                 log_beta_intra=(9.0, 12.0), log_beta_inter=(8.0, 11.0))

SearchSettings = collections.namedtuple('SearchSettings', 'random_points rounds points_per_axis window '
                                                          'penalty polish polish_iterations')

searchSettings = SearchSettings(random_points=64, rounds=6, points_per_axis=7, window=0.25,
                                penalty=1e6, polish=True, polish_iterations=400)

# seconds per step at per-replica batch 2, chosen so the prior reproduces the 44:18:02 sequential baseline
priorStepTime = 159482 / (26 * 250 * 169)

# offline record file
recordMagic = b'DMIS'
recordVersion = 1

bundledReference = 'reference_table.csv'
outputDirEnv = 'MISPAR_OUTPUT_DIR'
defaultOutputDir = 'output'
logFormat = '%(asctime)s %(levelname)s: %(message)s'
