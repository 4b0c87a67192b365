"""Exception types shared across the package."""


class ThinkGenError(Exception):
    """Base class for all package errors."""


class ShapeError(ThinkGenError, ValueError):
    """Incompatible array shapes."""


class NumericsError(ThinkGenError, ArithmeticError):
    """A NaN or Inf showed up where checked mode forbids it."""


class ContractError(ThinkGenError):
    """A documented pre-condition or usage contract was violated."""


class DeterminismError(ThinkGenError):
    """A function expected to be deterministic returned different values."""


class VocabError(ThinkGenError, ValueError):
    """Token id or token string outside the vocabulary."""


class MalformedRollout(ThinkGenError):
    """A sampled sequence never closed its think block."""


class SceneError(ThinkGenError, ValueError):
    """An invalid micro-world scene (overlaps, too many objects, ...)."""


class GenerationError(ThinkGenError):
    """Task generation ran out of material (e.g. exhausted key space)."""
