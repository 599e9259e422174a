"""Exception hierarchy shared by all modules.

Every error carries enough context to name the offending input; the CLI maps
``ValidationError`` subclasses to exit code 2 and ``ConvergenceError``
subclasses to exit code 3.
"""


class ToricError(Exception):
    """Base class for all package errors."""

    def to_dict(self):
        out = {"error": type(self).__name__, "message": str(self)}
        out.update({k: v for k, v in vars(self).items() if _jsonable(v)})
        return out


def _jsonable(v):
    return isinstance(v, (int, float, str, bool, list, tuple, type(None)))


class ValidationError(ToricError, ValueError):
    """Input data violates a precondition."""


class ConvergenceError(ToricError, RuntimeError):
    """An iterative method failed to reach its tolerance."""


# polytope
class EmptyInterior(ValidationError):
    pass


class Unbounded(ValidationError):
    pass


class RedundantFacet(ValidationError):
    def __init__(self, index):
        super().__init__(f"facet {index} does not touch the polytope")
        self.index = index


class NonPrimitiveNormal(ValidationError):
    def __init__(self, index, normal=None):
        super().__init__(f"normal of facet {index} is not primitive: {normal}")
        self.index = index


class NonIntegralNormals(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


# moments
class DegenerateSimplex(ValidationError):
    pass


# invariants
class TauOutsidePolytope(ValidationError):
    pass


class LPFailure(ConvergenceError):
    def __init__(self, status, message=""):
        super().__init__(f"linear program failed (status {status}) {message}".strip())
        self.status = status


class NonConvergence(ConvergenceError):
    def __init__(self, message, iterations=None, residual=None, **extra):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        for k, v in extra.items():
            setattr(self, k, v)


# transform
class EvaluationOutsideDomain(ValidationError):
    pass


class InversionFailure(ConvergenceError):
    def __init__(self, node, residual=None):
        super().__init__(f"gradient inversion stalled at node {node} (residual {residual})")
        self.node = node
        self.residual = residual


# ma_solver
class InvalidAngles(ValidationError):
    pass


class NonConvexIterate(ConvergenceError):
    def __init__(self, nodes):
        nodes = [int(k) for k in nodes]
        super().__init__(f"discrete Hessian not positive definite at {len(nodes)} node(s)")
        self.nodes = nodes[:50]


class OracleNonConvergence(ConvergenceError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


# family
class AlphaTooLarge(ValidationError):
    def __init__(self, t, alpha, bound):
        super().__init__(f"alpha={alpha} is not below the Ricci bound {bound} at t={t}")
        self.t = float(t)
        self.alpha = float(alpha)
        self.bound = float(bound)
