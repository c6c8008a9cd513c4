"""Exception hierarchy. The CLI maps these onto exit codes."""


class RemindError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(RemindError):
    """A file does not follow its documented format."""


class ParameterError(RemindError, ValueError):
    pass


class DataError(RemindError):
    pass


class ConfigError(RemindError):
    pass


class OracleError(RemindError):
    """The model under audit could not be reached or answered badly."""


class CapabilityError(RemindError):
    """An oracle was asked for something it does not declare."""

    def __init__(self, capability, requester=None):
        self.capability = capability
        self.requester = requester
        msg = f"oracle lacks capability {capability!r}"
        if requester:
            msg += f" (required by {requester})"
        super().__init__(msg)


class MetricError(RemindError, ValueError):
    pass


class TrainingError(RemindError):
    pass
