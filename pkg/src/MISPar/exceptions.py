"""
Module
------
exceptions.py

Summary
-------
Error hierarchy for the package. Every error carries the name of the operation that raised it so the
command line can print a single diagnostic line of the form ``<operation>: <ErrorClass>: <message>``.
"""


class MISParError(Exception):
    """Root of all package errors

    :param operation: name of the failing operation, e.g. 'cross_product'
    :type operation: str
    :param message: human readable detail
    :type message: str
    """

    def __init__(self, operation, message=''):
        self.operation = operation
        self.message = message
        super().__init__(f'{operation}: {message}' if message else operation)

    def __str__(self):
        # OSError subclasses would otherwise render as '[Errno ...]'
        return f'{self.operation}: {self.message}' if self.message else self.operation

    def diagnostic(self):
        return f'{self.operation}: {type(self).__name__}: {self.message}'


# hpgrid
class EmptyAxis(MISParError):
    pass


class DuplicateAxis(MISParError):
    pass


class DuplicateValue(MISParError):
    pass


class InvalidCount(MISParError):
    pass


class InvalidRate(MISParError):
    pass


# archmodel
class InvalidArch(MISParError):
    pass


class ShapeError(MISParError, ValueError):
    pass


class ArchError(MISParError):
    pass


class RangeError(MISParError):
    pass


# lossmath
class InvalidEpsilon(MISParError):
    pass


# datapipe
class InvalidDims(MISParError):
    pass


class CropError(MISParError):
    pass


class LayoutError(MISParError):
    pass


class LabelError(MISParError):
    pass


class SplitError(MISParError):
    pass


class IoError(MISParError, OSError):
    pass


class CorruptRecord(MISParError):
    """CRC mismatch on a stored record; ``record_id`` names the record"""

    def __init__(self, operation, message='', record_id=None):
        super().__init__(operation, message)
        self.record_id = record_id


# clustersim
class EmptyGrid(MISParError):
    pass


class InfeasibleAssignment(MISParError):
    pass


class ScheduleConflict(MISParError):
    pass


class InvalidTime(MISParError):
    pass


# costcal / cli
class ModelError(MISParError):
    pass


class InputError(MISParError):
    pass


class ConfigError(MISParError):
    pass
