"""
Module
------
hpgrid.py: Hyper-parameter grid expansion

Summary
-------
Hyper-parameter spaces are declared as ordered axes of scalar values and expanded by cross-product into
ExperimentSpec records. Also holds the device-count scaling rules: the global batch is the per-replica batch
times the GPU count, and the learning rate is the base rate times the GPU count.

Notes
-----
Real values are carried as Decimal so duplicates are detected on their exact written form rather than on
float equality. Axes named ``epochs``, ``per_replica_batch`` (or ``batch``) and ``base_lr`` (or ``lr``)
set the corresponding ExperimentSpec fields; any other axis only lands in the assignment.
"""
import itertools
import logging
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from numbers import Integral, Real

import pandas as pd

from MISPar import config
from MISPar.exceptions import EmptyAxis, DuplicateAxis, DuplicateValue, InvalidCount, InvalidRate

logger = logging.getLogger(__name__)

REAL, INTEGER, CATEGORICAL = 'real', 'integer', 'categorical'

_batchAxes = ('per_replica_batch', 'batch')
_lrAxes = ('base_lr', 'lr')
_derivedColumns = ('id', 'global_batch', 'lr')


@dataclass(frozen=True)
class HyperValue:
    """Scalar grid value tagged with its kind"""
    kind: str
    value: object

    @classmethod
    def of(cls, raw):
        """Tag a raw config value

        YAML hands back ints, floats, and strings such as '1e-4' (no dot, so not resolved as a float).
        Numeric strings become reals, anything else a categorical token.
        """
        if isinstance(raw, HyperValue):
            return raw
        if isinstance(raw, bool):
            return cls(CATEGORICAL, str(raw).lower())
        if isinstance(raw, Integral):
            return cls(INTEGER, int(raw))
        if isinstance(raw, Decimal):
            return cls(REAL, raw)
        if isinstance(raw, Real):
            return cls(REAL, Decimal(repr(float(raw))))
        text = str(raw).strip()
        try:
            number = Decimal(text)
        except InvalidOperation:
            return cls(CATEGORICAL, text)
        if not number.is_finite():
            return cls(CATEGORICAL, text)
        return cls(REAL, number)

    def key(self):
        return self.kind, str(self.value)

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class HyperAxis:
    name: str
    values: tuple

    def __init__(self, name, values):
        object.__setattr__(self, 'name', str(name))
        object.__setattr__(self, 'values', tuple(HyperValue.of(v) for v in values))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class HyperSpace:
    axes: tuple

    def __init__(self, axes):
        object.__setattr__(self, 'axes', tuple(axes))

    @classmethod
    def from_mapping(cls, grid):
        """Build a space from a ``grid`` config section (axis name -> list of values, in declared order)"""
        axes = []
        for name, values in grid.items():
            if not isinstance(values, (list, tuple)):
                values = [values]
            axes.append(HyperAxis(name, values))
        return cls(axes)

    def size(self):
        total = 1
        for axis in self.axes:
            total *= len(axis)
        return total


@dataclass(frozen=True)
class ExperimentSpec:
    id: int
    assignment: dict = field(hash=False)
    per_replica_batch: int = config.deployment.per_replica_batch
    base_lr: object = config.deployment.base_lr
    epochs: int = config.deployment.epochs


def validate_space(space, operation='cross_product'):
    if not space.axes:
        raise EmptyAxis(operation, 'hyper-parameter space has no axes')
    seen = set()
    for axis in space.axes:
        if axis.name in seen:
            raise DuplicateAxis(operation, f'axis {axis.name!r} declared twice')
        seen.add(axis.name)
        if not axis.values:
            raise EmptyAxis(operation, f'axis {axis.name!r} has no values')
        keys = [v.key() for v in axis.values]
        if len(set(keys)) != len(keys):
            raise DuplicateValue(operation, f'axis {axis.name!r} repeats a value')


def _as_positive_int(hv, axis, operation):
    if hv.kind != INTEGER or hv.value < 1:
        raise InvalidCount(operation, f'axis {axis!r} needs positive integers, got {hv.value}')
    return hv.value


def _as_positive_rate(hv, axis, operation):
    if hv.kind == CATEGORICAL or hv.value <= 0:
        raise InvalidRate(operation, f'axis {axis!r} needs positive reals, got {hv.value}')
    return Decimal(hv.value)


def cross_product(space, defaults=None):
    """Expand a hyper-parameter space into experiment specifications

    Row-major over the declared axis order (last axis varies fastest); ids are 0..E-1.

    :param space: the hyper-parameter space
    :type space: HyperSpace
    :param defaults: deployment defaults for batch, base lr and epochs (Optional, Default=config.deployment)
    :type defaults: config.Deployment
    :return: one spec per grid point
    :rtype: list[ExperimentSpec]
    """
    validate_space(space)
    defaults = config.deployment if defaults is None else defaults
    names = [axis.name for axis in space.axes]

    specs = []
    for i, combo in enumerate(itertools.product(*(axis.values for axis in space.axes))):
        batch, lr, epochs = defaults.per_replica_batch, defaults.base_lr, defaults.epochs
        for name, hv in zip(names, combo):
            if name in _batchAxes:
                batch = _as_positive_int(hv, name, 'cross_product')
            elif name in _lrAxes:
                lr = _as_positive_rate(hv, name, 'cross_product')
            elif name == 'epochs':
                epochs = _as_positive_int(hv, name, 'cross_product')
        specs.append(ExperimentSpec(id=i, assignment=dict(zip(names, combo)),
                                    per_replica_batch=batch, base_lr=lr, epochs=epochs))
    logger.debug('expanded %d axes into %d experiments', len(names), len(specs))
    return specs


def scale_global_batch(per_replica_batch, n_gpus):
    """Global batch when each of n_gpus replicas takes per_replica_batch samples"""
    for value in (per_replica_batch, n_gpus):
        if isinstance(value, bool) or not isinstance(value, Integral) or value < 1:
            raise InvalidCount('scale_global_batch', f'expected a positive integer, got {value!r}')
    return per_replica_batch * n_gpus


def scale_lr(base_lr, n_gpus):
    """Initial learning rate scaled linearly with the GPU count

    Float rates are taken at their shortest written form, so the product is an exact Decimal:
    scale_lr(1e-4, 3) is Decimal('0.0003').
    """
    if isinstance(n_gpus, bool) or not isinstance(n_gpus, Integral) or n_gpus < 1:
        raise InvalidCount('scale_lr', f'expected a positive GPU count, got {n_gpus!r}')
    if not base_lr > 0:
        raise InvalidRate('scale_lr', f'base learning rate must be positive, got {base_lr!r}')
    if not isinstance(base_lr, Decimal):
        base_lr = Decimal(repr(float(base_lr)))
    return base_lr * n_gpus


def _axisColumn(name):
    return f'axis_{name}' if name in _derivedColumns else name


def grid_table(specs, n_gpus=1):
    """Experiments as a table with columns id, one per axis, global_batch and lr

    Axis columns named like a derived column (id, global_batch, lr) are written as axis_<name>.

    :param specs: expanded grid
    :type specs: list[ExperimentSpec]
    :param n_gpus: GPU count the scaling rules are applied for
    :type n_gpus: int
    :rtype: pd.DataFrame
    """
    rows = []
    for spec in specs:
        row = {'id': spec.id}
        row.update({_axisColumn(name): str(hv) for name, hv in spec.assignment.items()})
        row['global_batch'] = scale_global_batch(spec.per_replica_batch, n_gpus)
        row['lr'] = str(scale_lr(spec.base_lr, n_gpus))
        rows.append(row)
    axes = [_axisColumn(name) for name in specs[0].assignment] if specs else []
    columns = ['id'] + axes + ['global_batch', 'lr']
    return pd.DataFrame(rows, columns=columns)


def default_specs(count, epochs=None, per_replica_batch=None):
    """Anonymous grid of ``count`` experiments carrying only the deployment defaults"""
    if count < 1:
        raise InvalidCount('default_specs', f'grid size must be positive, got {count}')
    epochs = config.deployment.epochs if epochs is None else epochs
    batch = config.deployment.per_replica_batch if per_replica_batch is None else per_replica_batch
    return [ExperimentSpec(id=i, assignment={}, per_replica_batch=batch, epochs=epochs) for i in range(count)]
