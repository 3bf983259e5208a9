"""Exception types shared across the toolkit."""


class ThreatKgError(Exception):
    """Base class for errors raised by this package."""


class InputFormatError(ThreatKgError):
    """A source document or file does not match the expected format."""


class UnknownEntityError(ThreatKgError, KeyError):
    """An entity or relation is absent from the model vocabulary.

    At prediction time this means the entity did not exist at the
    snapshot date the model was trained on.
    """


class IncompatibleGraphsError(ThreatKgError):
    """Two graphs were built with different options and cannot be compared."""


class TrainingDiverged(ThreatKgError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, last_finite_loss: float):
        super().__init__(
            f"non-finite loss at epoch {epoch}; last finite loss was {last_finite_loss}"
        )
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss
