"""Exception hierarchy shared by every fedsl module."""


class FedSLError(Exception):
    pass


class DimensionError(FedSLError, ValueError):
    """Array shapes disagree."""


class InputError(FedSLError, ValueError):
    """A value is outside the domain an operation accepts."""


class ProtocolError(FedSLError):
    """A wire message does not match what the receiver expects."""


class ConfigError(FedSLError, ValueError):
    """Invalid experiment or bound configuration.

    ``key`` names the offending configuration entry so the CLI can report it.
    """

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
