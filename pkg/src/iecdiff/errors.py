"""Exception types shared across the package."""


class InvalidRangeError(ValueError):
    """A numeric argument lies outside its admissible range."""


class DimensionError(ValueError):
    """State or prediction vectors do not match the model dimension."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DivergenceError(RuntimeError):
    """A sampler or correction loop produced a non-finite state.

    ``step`` is the sampling position where it happened (if known) and
    ``lipschitz`` the contraction constant measured there, for diagnosis.
    """

    def __init__(self, message, step=None, lipschitz=None):
        super().__init__(message)
        self.step = step
        self.lipschitz = lipschitz
