"""Exception taxonomy shared across the package."""


class StructuralError(ValueError):
    """Shape, rank, or wiring violation detected before any compute runs."""


class DomainError(ValueError):
    """Input lies outside an operation's mathematical domain."""


class ConfigError(ValueError):
    """Invalid, inconsistent, or unknown configuration value."""


class LoadError(RuntimeError):
    """Dataset or checkpoint bytes that cannot be read or fail validation."""


class TrainingAborted(RuntimeError):
    """The total loss stopped being finite; training cannot continue."""

    def __init__(self, epoch: int, batch_index: int, task_losses):
        self.epoch = epoch
        self.batch_index = batch_index
        self.task_losses = tuple(float(v) for v in task_losses)
        super().__init__(
            f"non-finite total loss at epoch {epoch}, batch {batch_index}; "
            f"task losses: {self.task_losses}"
        )
