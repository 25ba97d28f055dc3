class NicError(Exception):
    """Base class for every error raised by the nic package."""


class ConfigError(NicError):
    """
    Invalid configuration or call arguments.
    `field` is the dotted path of the offending config entry, when known.
    """
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class SimulationError(NicError):
    def __init__(self, message, state=None):
        self.state = state
        super().__init__(message if state is None else f"{message} (state={state})")


class TrainingError(NicError):
    def __init__(self, message, stage=None, epoch=None, batch=None):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        where = ", ".join(
            f"{k}={v}" for k, v in (('stage', stage), ('epoch', epoch), ('batch', batch)) if v is not None
        )
        super().__init__(f"{message} [{where}]" if where else message)


class PlantError(NicError):
    pass


class CheckpointError(NicError):
    """Malformed or inconsistent checkpoint / dataset file."""
    def __init__(self, message, position=None):
        self.position = position
        super().__init__(f"{message} at {position}" if position else message)


class BaselineError(NicError):
    pass


class DomainError(NicError, ValueError):
    pass
