class LabError(Exception):
    """Base class for curvature lab errors"""


class DimensionMismatch(LabError, ValueError):
    """Operands live in different dimensions"""

    def __init__(self, left, right, what="operands"):
        super().__init__(f"dimension mismatch between {what}: {left} != {right}")
        self.left = left
        self.right = right


class SymmetryViolation(LabError, ValueError):
    """Input array misses a required symmetry"""

    def __init__(self, message, error=None):
        super().__init__(message if error is None else f"{message} (max error {error:.3e})")
        self.error = error


class GaugeViolation(LabError, ValueError):
    """Trace-free Ricci part of S is not zero"""

    def __init__(self, error, tol):
        super().__init__(f"|Ric0(S)| = {error:.3e} exceeds gauge tolerance {tol:.1e}")
        self.error = error
        self.tol = tol


class PreconditionError(LabError, ValueError):
    """Operation called outside its domain"""


class SamplerFailure(LabError, RuntimeError):
    """Rejection sampling ran out of attempts"""

    def __init__(self, kind, attempts):
        super().__init__(f"could not sample '{kind}' after {attempts} attempts")
        self.kind = kind
        self.attempts = attempts


class ReconstructionError(LabError, ArithmeticError):
    """A decomposition does not reassemble the tensor it came from"""

    def __init__(self, error, tol):
        super().__init__(f"reconstruction error {error:.3e} exceeds {tol:.1e}")
        self.error = error
        self.tol = tol


class StepSizeUnderflow(LabError, RuntimeError):
    """Adaptive integration could not keep the step above the floor"""

    def __init__(self, time, step, trace=None, state=None):
        super().__init__(f"step size {step:.3e} underflow at t = {time:.6e}")
        self.time = time
        self.step = step
        self.trace = trace
        self.state = state


class BuildError(LabError, ValueError):
    """A constructed object fails one of its invariants"""

    def __init__(self, which, detail=""):
        message = f"invariant '{which}' violated"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.which = which
