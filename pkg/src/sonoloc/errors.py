"""Exception hierarchy shared by all pipeline stages."""


class SonolocError(Exception):
    """Base class; the CLI maps every subclass to a JSON error record."""

    code = "error"


class InvalidParams(SonolocError, ValueError):
    code = "invalid_params"


class InvalidSpec(SonolocError, ValueError):
    code = "invalid_spec"


class OutOfRange(SonolocError, ValueError):
    code = "out_of_range"


class InsufficientInput(SonolocError, ValueError):
    code = "insufficient_input"


class NotConverged(SonolocError, RuntimeError):
    code = "not_converged"


class WrongLevel(SonolocError, ValueError):
    code = "wrong_level"


class NoDetection(SonolocError, RuntimeError):
    code = "no_detection"


class EmptyCandidates(SonolocError, ValueError):
    code = "empty_candidates"


class DegenerateGeometry(SonolocError, RuntimeError):
    code = "degenerate_geometry"


class NonConvergence(SonolocError, RuntimeError):
    code = "non_convergence"


class NoAnchor(SonolocError, RuntimeError):
    code = "no_anchor"


class AmbiguousEpoch(SonolocError, RuntimeError):
    code = "ambiguous_epoch"


class NegativeRange(SonolocError, ValueError):
    code = "negative_range"
