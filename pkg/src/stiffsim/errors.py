"""Exception hierarchy for stiffsim."""


class StiffSimError(Exception):
    """Base class for all errors raised by this package."""


class NotSPD(StiffSimError):
    def __init__(self, name, min_eig):
        self.name = name
        self.min_eig = float(min_eig)
        super().__init__(f"{name} is not symmetric positive definite (min eigenvalue {min_eig:.3e})")


class NotPSD(StiffSimError):
    def __init__(self, name, min_eig):
        self.name = name
        self.min_eig = float(min_eig)
        super().__init__(f"{name} is not positive semi-definite (min eigenvalue {min_eig:.3e})")


class NotSymmetric(StiffSimError):
    def __init__(self, name, asym):
        self.name = name
        self.asym = float(asym)
        super().__init__(f"{name} is not symmetric (relative asymmetry {asym:.3e})")


class CommutationViolation(StiffSimError):
    def __init__(self, defect, tol):
        self.defect = float(defect)
        self.tol = float(tol)
        super().__init__(
            f"stiffness and damping do not commute: relative defect {defect:.3e} > {tol:.1e}"
        )


class DimensionMismatch(StiffSimError):
    pass


class SimultaneousDiagonalizationFailure(StiffSimError):
    def __init__(self, offdiag):
        self.offdiag = float(offdiag)
        super().__init__(
            f"damping is not diagonal in any stiffness eigenbasis (off-diagonal {offdiag:.3e})"
        )


class QuadratureNonConvergence(StiffSimError):
    pass


class PathMismatch(StiffSimError):
    pass


class GridMismatch(StiffSimError):
    pass


class GridNesting(StiffSimError):
    pass


class NonFiniteState(StiffSimError):
    def __init__(self, step=None):
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite state encountered{where}")


class BlowUp(StiffSimError):
    def __init__(self, step, norm, threshold):
        self.step = int(step)
        self.norm = float(norm)
        self.threshold = float(threshold)
        super().__init__(f"state norm {norm:.3e} exceeded {threshold:.1e} at step {step}")


class UnsupportedStochastic(StiffSimError):
    pass


class MissingPotential(StiffSimError):
    pass


class ConfigInvalid(StiffSimError):
    pass


class ParseError(StiffSimError):
    def __init__(self, message, line=None):
        self.line = line
        where = "" if line is None else f" (line {line})"
        super().__init__(f"{message}{where}")


class UnknownProblem(StiffSimError):
    pass


class UnknownMethod(StiffSimError):
    pass


class MissingField(StiffSimError):
    pass
