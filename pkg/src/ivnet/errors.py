"""Error taxonomy shared by every module.

Three failure surfaces, mapped onto CLI exit codes by ``ivnet.cli``:
contract violations (bad shapes, bad arguments, undefined metrics),
numeric faults (non-finite values escaping an op), and broken input
files.
"""


class ContractError(ValueError):
    """A caller violated a documented precondition or invariant."""


class NumericFault(ArithmeticError):
    """An operation produced NaN/Inf, or a density degenerated to zero."""


class DataFormatError(IOError):
    """A data file (raster, manifest, config) could not be decoded."""
