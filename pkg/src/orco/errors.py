"""Exception hierarchy shared by every orco module."""


class OrcoError(Exception):
    """Base class for all errors raised by orco."""


class InvalidArgumentError(OrcoError, ValueError):
    pass


class ConfigurationError(OrcoError, ValueError):
    """A run or loss was configured in a way that cannot be evaluated."""


class CapacityError(OrcoError, ValueError):
    """A pool (targets, classes, samples) is smaller than what was requested."""


class DegenerateMeanError(OrcoError, ValueError):
    def __init__(self, class_id, norm):
        super().__init__(f"class {class_id} has a degenerate mean (norm {norm:.3g})")
        self.class_id = class_id


class UnassignedClassError(OrcoError, KeyError):
    def __init__(self, class_ids):
        self.class_ids = sorted(int(c) for c in class_ids)
        super().__init__(f"classes without an assigned target: {self.class_ids}")

    def __str__(self):
        return self.args[0]


class EmptyScopeError(OrcoError, ValueError):
    pass


class InvalidStateError(OrcoError, RuntimeError):
    pass


class NumericalFailureError(OrcoError, FloatingPointError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ScheduleExhaustedError(OrcoError, RuntimeError):
    pass


class GenerationFailureError(OrcoError, RuntimeError):
    pass


class ParseError(OrcoError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingFailureError(OrcoError, RuntimeError):
    """Raised by the protocol driver; carries the phase and session that failed."""

    def __init__(self, message, phase=None, session=None):
        super().__init__(message)
        self.phase = phase
        self.session = session
