# src/vcs_phantom/core/errors.py
from __future__ import annotations


class VcsPhantomError(Exception):
    """Raiz de todos os erros esperados do pipeline."""

    exit_code = 5


class ConfigError(VcsPhantomError):
    exit_code = 2


class DataError(VcsPhantomError):
    exit_code = 3


class GridMismatchError(DataError):
    pass


class VgfFormatError(DataError):
    pass


class CohortGenerationError(DataError):
    pass


class NumericError(VcsPhantomError):
    exit_code = 4


class DegenerateFitError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, VcsPhantomError):
        return exc.exit_code
    return 5
