class MaskfedError(Exception):
    """Base class of every error raised on purpose by maskfed."""


class ContractViolation(MaskfedError, ValueError):
    """An operation was called outside its preconditions."""


class ConfigError(MaskfedError, ValueError):
    """The experiment configuration is invalid."""


class DataFormatError(MaskfedError, ValueError):
    """An input file does not follow the expected layout."""


class TrainingDiverged(MaskfedError, RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float) -> None:
        super().__init__(
            f"Non-finite training loss {loss} at epoch {epoch}, step {step}"
        )
        self.epoch = epoch
        self.step = step
        self.loss = loss
