"""Exception hierarchy shared across the pipeline."""


class EdgeDistillError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(EdgeDistillError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Tensor/matrix dimensions do not line up."""


class DegenerateInputError(EdgeDistillError):
    """Input is numerically degenerate (zero row, all-zero channel, ...)."""


class ConfigError(EdgeDistillError):
    """Bad configuration file, key, or value."""


class DataError(EdgeDistillError):
    """Dataset content is inconsistent (bad label, missing feature, ...)."""


class FormatError(EdgeDistillError):
    """A binary file failed to decode; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CurationEmptyError(DataError):
    """Curation removed every sample."""

    def __init__(self, tau_c):
        super().__init__(
            f"curation emptied dataset: no sample reached confidence threshold tau_c={tau_c}"
        )
        self.tau_c = tau_c


class DivergenceError(EdgeDistillError):
    """Training loss became non-finite."""


class CollapseError(EdgeDistillError):
    """All embeddings collapsed to a single point during training."""


class GenerationError(EdgeDistillError):
    """Synthetic benchmark generation could not satisfy its constraints."""
