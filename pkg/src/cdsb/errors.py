"""Exception types shared across the package."""


class CDSBError(Exception):
    """Base class for all package errors."""


class InvalidArgument(CDSBError, ValueError):
    pass


class ChainError(CDSBError):
    """A drift evaluation failed while simulating a chain."""

    def __init__(self, k: int, row: int, message: str):
        self.k = k
        self.row = row
        super().__init__(f"drift failed at k={k}, row={row}: {message}")


class IllConditioned(CDSBError):
    pass


class FitError(CDSBError):
    def __init__(self, message: str, iteration: int | None = None, k: int | None = None):
        self.iteration = iteration
        self.k = k
        where = []
        if iteration is not None:
            where.append(f"iteration={iteration}")
        if k is not None:
            where.append(f"k={k}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class StateError(CDSBError):
    pass


class DegenerateEnsemble(CDSBError):
    pass


class NumericalBlowup(CDSBError):
    pass


class UnsupportedProblem(CDSBError):
    pass


class InvalidGrid(CDSBError):
    pass


class UndefinedMoments(CDSBError):
    pass


class ConfigError(CDSBError):
    pass


class MissingOracle(CDSBError):
    pass
