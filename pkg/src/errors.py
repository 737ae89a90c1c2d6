"""Exception hierarchy shared by the pipeline stages.

Stages map ``ConfigError`` to exit code 1 (usage) and every other
``PipelineError`` to exit code 2 (data).
"""


class PipelineError(Exception):
    """Base class for every error raised by the pipeline."""


class ConfigError(PipelineError):
    """Invalid configuration file, flag or value."""


class AudioError(PipelineError):
    """Audio input that cannot be turned into segments."""


class NetworkConfigError(PipelineError):
    """Network configuration that cannot be wired."""


class ShapeError(PipelineError):
    """Tensor with an unexpected shape or non-finite content."""


class WrongHeadError(PipelineError):
    """Forward call that does not match the network head."""


class CheckpointError(PipelineError):
    """Unreadable, truncated or mismatched checkpoint."""


class MiningError(PipelineError):
    """Invalid input to the triplet machinery."""


class TrainingError(PipelineError):
    """Training cannot start or continue."""


class TrainingDiverged(TrainingError):
    """Loss became NaN or infinite; a diagnostic checkpoint was written."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class UnknownClassError(PipelineError):
    """Label not known to a trained model."""


class SplitError(PipelineError):
    """Dataset that cannot be split at the requested ratios."""


class OpenSetError(PipelineError):
    """Class Gaussians that cannot be fitted or applied."""


class ManifestError(PipelineError):
    """Malformed dataset manifest."""


class CorruptStoreError(PipelineError):
    """Feature store whose index and data files disagree."""


class EvaluationError(PipelineError):
    """Evaluation inputs that are missing or inconsistent."""
