"""Exception types raised across the package."""


class EmptyBasisError(ValueError):
    """Raised when a truncation contains no eigenvalue level."""


class BasisMismatchError(ValueError):
    """Raised when two block matrices live on different truncations."""


class QuadratureError(RuntimeError):
    """Raised when a quadrature fails its order-doubling check."""

    def __init__(self, message, max_change=None):
        super().__init__(message)
        self.max_change = max_change


class StripError(ValueError):
    """Raised when a quasi-periodic matrix is evaluated outside its strip."""


class NotHermitianError(ValueError):
    """Raised when a block that must be Hermitian is not."""


class DivisorTooSmall(ArithmeticError):
    """A small divisor fell below its Melnikov threshold.

    Attributes carry the offending Fourier mode, the cluster pair and the
    divisor value so the frequency can be re-screened.
    """

    def __init__(self, k, a, b, value, threshold):
        self.k = tuple(int(x) for x in k)
        self.a = a
        self.b = b
        self.value = float(value)
        self.threshold = float(threshold)
        super().__init__(
            f"divisor {self.value:.3e} < {self.threshold:.3e} "
            f"at k={self.k}, clusters ({a}, {b})"
        )


class ScheduleError(ValueError):
    """Raised when the parameter schedule violates a smallness requirement."""


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
