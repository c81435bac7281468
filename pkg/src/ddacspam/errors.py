"""Exception taxonomy shared across the package.

Two families matter to callers: problems with the data handed to us
(``DataError``, CLI exit code 2) and problems encountered while fitting
(``FitError``; solver non-convergence maps to CLI exit code 3).  Wire and
transport failures get their own family since they indicate an unhealthy
worker rather than bad input.
"""

from __future__ import annotations


class DdacError(Exception):
    """Base class for every error raised by this package."""


# ---------------------------------------------------------------- data errors


class DataError(DdacError):
    """The input violates a precondition (shape, type, parse, range)."""


class MissingFile(DataError):
    pass


class MissingColumn(DataError):
    pass


class TooFewRows(DataError):
    pass


class NonNumericCell(DataError):
    def __init__(self, row: int, col: str):
        super().__init__(f"non-numeric cell at row {row}, column {col!r}")
        self.row = row
        self.col = col


class ConstantColumn(DataError):
    def __init__(self, col: str):
        super().__init__(f"column {col!r} has zero sample variance")
        self.col = col


class DegenerateColumn(DataError):
    """A covariate has too few distinct values to carry a spline basis."""


class ConstantBasisColumn(DataError):
    """A basis column has (numerically) zero variance; usually knot ties."""


class OutOfRange(DataError):
    """A (machine, local index) pair is not present in the partition plan."""


class UnknownFeature(DataError):
    def __init__(self, j: int):
        super().__init__(f"feature index {j} outside 1..p")
        self.j = j


class ZeroBlock(DataError):
    """Quasi-correlation of an all-zero block is undefined."""


class ShapeMismatch(DataError):
    pass


class NoGroundTruth(DataError):
    """The dataset carries no ground truth, so the metric is undefined."""


# ----------------------------------------------------------------- fit errors


class FitError(DdacError):
    """The pipeline failed while fitting."""


class NonFiniteEigenvalue(FitError):
    pass


class RankDeficientBlock(FitError):
    def __init__(self, k: int):
        super().__init__(f"design block {k} is rank deficient")
        self.k = k


class SingularR(FitError):
    def __init__(self, k: int):
        super().__init__(f"R factor of block {k} is numerically singular")
        self.k = k


class NotConverged(FitError):
    """Block updates did not reach the change tolerance within the cap."""


class OverSelected(FitError):
    """The union of selected basis columns is too large to refine safely."""


class NearSingularInner(FitError):
    def __init__(self, min_eigenvalue: float):
        super().__init__(
            "inner matrix of the scaling step is near singular "
            f"(min eigenvalue {min_eigenvalue:.3e}); refusing to regularize"
        )
        self.min_eigenvalue = min_eigenvalue


class SigmaZero(FitError):
    """The residual scale estimate is zero; test statistics are undefined."""


# ---------------------------------------------------- protocol and transport


class ProtocolError(DdacError):
    """A wire frame or message sequence violates the protocol."""


class TruncatedFrame(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class ConnectionLost(ProtocolError):
    def __init__(self, machine: int):
        super().__init__(f"connection to worker {machine} lost")
        self.machine = machine


class Timeout(ProtocolError):
    def __init__(self, machine: int, phase: str):
        super().__init__(f"worker {machine} timed out during {phase}")
        self.machine = machine
        self.phase = phase


class BindFailure(ProtocolError):
    pass


class WorkerFailure(FitError):
    """A worker aborted the run; carries the machine id and the cause."""

    def __init__(self, machine: int, cause: str, timings: dict | None = None):
        super().__init__(f"worker {machine} failed: {cause}")
        self.machine = machine
        self.cause = cause
        self.timings = timings or {}
