"""Exception hierarchy shared by the solvers and the CLI."""


class PlanningError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(PlanningError, ValueError):
    """Invalid configuration or inconsistent problem data."""

    exit_code = 2


class DimensionError(ConfigError):
    """Vector or matrix shapes do not agree."""


class DomainError(PlanningError, ValueError):
    """An argument lies outside the domain of a formula."""

    exit_code = 2


class NumericalFailure(PlanningError, ArithmeticError):
    """An iterative routine failed to converge or to bracket a root."""

    exit_code = 4

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class UnboundedProx(NumericalFailure):
    """The prox of the concave quadratic has no minimizer for this step size."""


class DegenerateProx(NumericalFailure):
    """The step size sits exactly on the boundedness threshold."""


class DegenerateConstraint(NumericalFailure):
    """A quadratic constraint has a non-positive curvature entry."""


class InfeasibleProblem(PlanningError):
    """No plan satisfying all organ-at-risk constraints was found.

    Attributes
    ----------
    violated : list
        Origins ``(oar_name, voxel)`` of the constraints still violated.
    fractions : tuple or None
        Fraction counts at which infeasibility was detected, if known.
    """

    exit_code = 3

    def __init__(self, message, violated=(), fractions=None):
        super().__init__(message)
        self.violated = list(violated)
        self.fractions = fractions

    def __str__(self):
        msg = super().__str__()
        if self.fractions is not None:
            msg += f" (N={tuple(float(n) for n in self.fractions)})"
        if self.violated:
            names = sorted({str(v[0]) for v in self.violated})
            msg += f"; violated: {', '.join(names)} ({len(self.violated)} constraints)"
        return msg
