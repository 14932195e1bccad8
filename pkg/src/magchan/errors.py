"""Exception types shared across the package.

Every numerical obstruction that a caller might want to branch on has its
own class; all derive from :class:`NumericalFailure` so the CLI can map
them to a single exit code.
"""


class NumericalFailure(RuntimeError):
    """Base class for numerical obstructions and failures."""


class DegenerateRoot(NumericalFailure):
    """A fixed point with vanishing slope of its defining function."""

    def __init__(self, message, theta=None, sign=None, kappa=None):
        super().__init__(message)
        self.theta = theta
        self.sign = sign
        self.kappa = kappa


class NotApplicable(NumericalFailure):
    pass


class BranchCollision(NumericalFailure):
    def __init__(self, message, energy=None):
        super().__init__(message)
        self.energy = energy


class StepFailure(NumericalFailure):
    def __init__(self, message, last_state=None, tau=None):
        super().__init__(message)
        self.last_state = last_state
        self.tau = tau


class NonPositiveEpsilon(NumericalFailure):
    pass


class BoundaryHit(NumericalFailure):
    """The shot left the admissible band |rho| < sqrt(2(E - V))."""

    def __init__(self, message, theta=None, rho=None):
        super().__init__(message)
        self.theta = theta
        self.rho = rho


class NoSolution(NumericalFailure):
    def __init__(self, message, profile=None):
        super().__init__(message)
        self.profile = profile


class EmptyWindow(NumericalFailure):
    pass


class NotDegenerate(NumericalFailure):
    pass


class NoTouch(NumericalFailure):
    pass


class ResonanceInterval(NumericalFailure):
    pass


class SingularBlowup(NumericalFailure):
    pass


class OutsideDomain(NumericalFailure):
    pass


class DomainExit(NumericalFailure):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class NearSingularJacobian(NumericalFailure):
    pass


class RegimeViolation(NumericalFailure):
    pass


class UnboundedWindow(NumericalFailure):
    pass


class NotSaddle(NumericalFailure):
    pass


class TailDivergence(NumericalFailure):
    pass


class ChartInvalid(NumericalFailure):
    pass


class ContinuationStall(NumericalFailure):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class CycleDetected(NumericalFailure):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness
