"""
Error hierarchy shared by every app of the pipeline.

Errors that reject caller input are also ``ValueError`` so plain callers can
catch them without importing this module.
"""


class GuidewireError(Exception):
    """Root of all pipeline errors."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class InvalidSampleError(GuidewireError, ValueError):
    pass


class SceneError(GuidewireError, ValueError):
    pass


class ShapeMismatchError(GuidewireError, ValueError):
    pass


class EmptyPoolError(GuidewireError, ValueError):
    """Raised for an empty background pool or an empty pseudo-label on the embedding grid."""


class NoForegroundError(GuidewireError, ValueError):
    pass


class InsufficientPixelsError(GuidewireError, ValueError):
    pass


class PromptBoundsError(GuidewireError, ValueError):
    pass


class LoRAError(GuidewireError):
    pass


class CheckpointError(GuidewireError):
    pass


class EmptyDatasetError(GuidewireError, ValueError):
    pass


class TrainingAbortedError(GuidewireError):
    """
    A loss went NaN/Inf; ``details`` names the offending part. ``manifest``
    carries the partial run manifest when the trainer had one.
    """

    manifest = None


class ConfigError(GuidewireError, ValueError):

    def __init__(self, message, diagnostics=None):
        super().__init__(message, {'diagnostics': list(diagnostics or [])})
        self.diagnostics = list(diagnostics or [])


class DatasetError(GuidewireError):
    pass


class OutputLockedError(GuidewireError):
    pass


class DecoderKindError(GuidewireError, ValueError):
    """The requested decode path does not exist on this model."""


class BenchmarkFailedError(GuidewireError):
    """One or more benchmark trend checks failed; ``details`` lists them."""
