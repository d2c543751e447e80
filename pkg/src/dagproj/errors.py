"""Exception types raised across the package."""


class DagError(Exception):
    """Base class for all package errors."""


class OutsideDomain(DagError):
    """I - W∘W is not a nonsingular M-matrix, so h(W) is undefined."""


class DivergedInnerSolve(DagError):
    """The inner acyclicity solve could not stay inside the domain."""


class TooLarge(DagError):
    """Exhaustive enumeration requested for too many nodes."""


class EmptyActiveSet(DagError):
    """Jacobian requested for a binding projection with no active entries."""


class DimensionMismatch(DagError, ValueError):
    """Array shapes do not agree."""


class NonFinite(DagError):
    """A NaN or infinity appeared in data, parameters or gradients.

    Attributes
    ----------
    iteration : int or None
        Optimizer iteration at which the problem was detected.
    snapshot : dict or None
        Parameter arrays at that iteration.
    """

    def __init__(self, message, iteration=None, snapshot=None):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot


class InfeasibleSpec(DagError, ValueError):
    """A generation spec asks for something impossible."""


class CyclicInput(DagError, ValueError):
    """A graph that must be acyclic contains a directed cycle."""


class ParseError(DagError, ValueError):
    """Malformed input file.

    Attributes
    ----------
    row, column : int or None
        1-based location of the offending field, when known.
    """

    def __init__(self, message, row=None, column=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.column = column


class EmptySampleBag(DagError, ValueError):
    """A sample-based metric was given no samples."""


class DegenerateTruth(DagError, ValueError):
    """AUROC needs at least one edge and one non-edge in the truth."""
