"""Exception types raised across the toolkit."""


class DkitError(Exception):
    """Base class for all toolkit errors."""


class ZeroNorm(DkitError, ValueError):
    pass


class NonPositiveTemperature(DkitError, ValueError):
    pass


class NonFiniteValue(DkitError, ArithmeticError):
    pass


class NoPositive(DkitError, ValueError):
    """An anchor has no matching candidate."""


class ShapeMismatch(DkitError, ValueError):
    pass


class NonFiniteTerm(DkitError, ArithmeticError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term
        self.value = value


class EmptyInput(DkitError, ValueError):
    pass


class NonFinite(DkitError, ArithmeticError):
    pass


class InvalidSpec(DkitError, ValueError):
    pass


class EmptyDataset(DkitError, ValueError):
    pass


class DegenerateInput(DkitError, ValueError):
    pass


class TooFewSamples(DkitError, ValueError):
    pass


class InvalidProportion(DkitError, ValueError):
    pass


class FormatError(DkitError, ValueError):
    pass


class ConfigError(DkitError, ValueError):
    pass


class NonFiniteLoss(DkitError, ArithmeticError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, step: int, checkpoint=None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint
