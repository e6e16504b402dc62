"""Exception hierarchy shared by every module of the package."""


class VGError(Exception):
    """Base class for all errors raised by vgpeft."""


class DimensionError(VGError, ValueError):
    pass


class ContractError(VGError, RuntimeError):
    pass


class ConfigError(VGError, ValueError):
    pass


class InputError(VGError, ValueError):
    pass


class SpecError(VGError, ValueError):
    pass


class StateError(VGError, RuntimeError):
    pass


class ChecksumError(VGError, ValueError):
    pass


class ParseError(VGError, ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ValidationError(VGError, ValueError):
    pass


class JoinError(VGError, ValueError):
    def __init__(self, message, missing=(), orphans=()):
        self.missing = list(missing)
        self.orphans = list(orphans)
        super().__init__(message)


class GenerationError(VGError, ValueError):
    pass


class DivergedError(VGError, RuntimeError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")
