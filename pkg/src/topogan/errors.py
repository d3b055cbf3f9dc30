"""Exception hierarchy shared by every stage of the pipeline."""


class TopoganError(Exception):
    pass


class ParameterError(TopoganError, ValueError):
    """Invalid scalar setting (material constants, bounds, counts, ...)."""


class DataError(TopoganError, ValueError):
    """Array contents or shapes that cannot be used."""


class SolverError(TopoganError):
    """Singular or otherwise unsolvable finite-element system."""


class OptimizationError(TopoganError):
    pass


class IntegrityError(TopoganError):
    """Corrupt or inconsistent file on disk."""


class SpecError(TopoganError, ValueError):
    """Network spec whose layer shapes do not compose."""


class TrainingError(TopoganError):
    pass


class UsageError(TopoganError):
    pass
