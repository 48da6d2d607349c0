"""Exception hierarchy shared across the package."""


class ScoutError(Exception):
    """Base class for all errors raised by scout."""


class ParameterError(ScoutError, ValueError):
    """An argument is out of range or inconsistent with another argument."""


class ValidationError(ScoutError, ValueError):
    """Data violates a type invariant (non-finite samples, bad dims, ...)."""


class FormatError(ScoutError):
    """A file on disk is missing its header or the header is malformed."""


class CorruptionError(ScoutError):
    """Header and payload disagree."""


class TrainingError(ScoutError):
    """Optimization hit a non-finite value.

    ``iteration`` is the step index at which it happened and ``checkpoint``
    holds the last parameters known to be finite (or None).
    """

    def __init__(self, message, iteration, checkpoint=None):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.checkpoint = checkpoint


class DependencyError(ScoutError):
    """A pipeline stage input is missing."""


class StalenessError(ScoutError):
    """A pipeline stage input no longer matches its recorded checksum."""
