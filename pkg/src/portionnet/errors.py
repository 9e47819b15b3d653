"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PortionNetError(Exception):
    exit_code = 2


class ConfigError(PortionNetError, ValueError):
    """Invalid configuration or rejected input."""

    exit_code = 1


class TrainingError(PortionNetError, RuntimeError):
    """Runtime failure during training (e.g. a non-finite loss)."""

    exit_code = 2

    def __init__(self, message, last_good_state=None, last_good_path=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.last_good_path = last_good_path


class IntegrityError(PortionNetError):
    """Corrupt or mismatched on-disk artifact."""

    exit_code = 3
