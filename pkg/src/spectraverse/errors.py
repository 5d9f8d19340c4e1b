"""Exception taxonomy shared by the library and the CLI.

Each class carries a stable ``taxonomy`` name; the CLI prints it on stderr
so scripts can branch on the failure class without parsing messages.
"""


class SpectraverseError(Exception):
    taxonomy = "runtime"


class InvalidArgumentError(SpectraverseError, ValueError):
    taxonomy = "invalid-argument"


class DegenerateGeometryError(SpectraverseError):
    taxonomy = "degenerate-geometry"


class IsolatedNodeError(SpectraverseError):
    taxonomy = "isolated-node"


class ConvergenceError(SpectraverseError):
    taxonomy = "numeric-convergence"


class SingularMatrixError(SpectraverseError):
    taxonomy = "singular-matrix"


class DegenerateEigenvectorError(SpectraverseError):
    taxonomy = "degenerate-eigenvector"


class PreconditionError(SpectraverseError):
    taxonomy = "precondition"


class CheckpointError(SpectraverseError):
    taxonomy = "checkpoint"
