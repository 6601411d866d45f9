"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class DivisionDegenerate(InvalidArgument, ZeroDivisionError):
    """Raised when a schedule coefficient used as a divisor is zero."""


class InvalidState(RuntimeError):
    pass


class CorruptShard(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    pass


class ConfigError(ValueError):
    """Carries every violation found while validating a config.

    ``violations`` is a list of ``(key_path, message)`` tuples.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{path}: {msg}" for path, msg in self.violations]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))


class DependencyError(RuntimeError):
    def __init__(self, path, what=""):
        self.path = str(path)
        msg = f"missing upstream artifact: {self.path}"
        if what:
            msg += f" ({what})"
        super().__init__(msg)
