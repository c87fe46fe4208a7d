"""Exception types raised across the simulator."""


class ArtidiffError(Exception):
    """Base class for all simulator errors."""


class NonFiniteInput(ArtidiffError, ValueError):
    pass


class ShapeMismatch(ArtidiffError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class SingularMatrix(ArtidiffError, ArithmeticError):
    pass


class SingularMassMatrix(SingularMatrix):
    pass


class ZeroNormQuaternion(ArtidiffError, ArithmeticError):
    pass


class ParseError(ArtidiffError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(ArtidiffError, ValueError):
    pass


class NonFiniteState(ArtidiffError, ArithmeticError):
    def __init__(self, message, pass_name=None, link=None, step=None):
        self.pass_name = pass_name
        self.link = link
        self.step = step
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        if pass_name is not None:
            parts.append(f"pass={pass_name}")
        if link is not None:
            parts.append(f"link={link}")
        super().__init__(" ".join(parts))


class TapeMismatch(ArtidiffError, ValueError):
    pass


class ZeroDiagonal(ArtidiffError, ArithmeticError):
    pass


class RecordMismatch(ArtidiffError, ValueError):
    pass


class IncompleteTrajectory(ArtidiffError, ValueError):
    pass


class MemoryBudgetExceeded(ArtidiffError, MemoryError):
    def __init__(self, requested, budget):
        self.requested = requested
        self.budget = budget
        super().__init__(f"tape storage {requested} bytes exceeds budget {budget} bytes")


class DivergenceDetected(ArtidiffError, ArithmeticError):
    pass


class NonFiniteProbe(ArtidiffError, ArithmeticError):
    pass
