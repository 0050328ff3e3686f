"""Exception types shared across the package."""


class LatrefError(Exception):
    pass


class ConfigError(LatrefError, ValueError):
    """Bad or unknown configuration key/value."""


class ShapeMismatch(LatrefError, ValueError):
    """Tensor shape incompatible with the operation's contract."""


class VocabOverflow(LatrefError, ValueError):
    """Token id outside the embedding table."""


class EmptyNegatives(LatrefError, ValueError):
    """Contrastive loss called with an empty negative set."""


class BatchTooSmall(LatrefError, ValueError):
    """Contrastive training needs at least two samples per batch."""


class DisabledFeature(LatrefError, RuntimeError):
    """A no-target-mode operation was called with the mode switched off."""


class EmptyEvaluation(LatrefError, ValueError):
    """Metric aggregation over zero samples."""


class InfeasibleSpec(LatrefError, RuntimeError):
    """Scene generation could not satisfy its constraints after bounded retries."""
