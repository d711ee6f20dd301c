"""Exception hierarchy shared by every module of the package."""


class PseudoPdeError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(PseudoPdeError, ValueError):
    """Invalid grid, model or solver settings."""


class NonPsdDiffusionError(PseudoPdeError, ValueError):
    """The diffusion matrix is not positive semi-definite at a sampled point."""

    def __init__(self, t, x, min_eigenvalue):
        self.t = t
        self.x = x
        self.min_eigenvalue = min_eigenvalue
        super().__init__(
            f"diffusion matrix is not PSD at t={t!r}, x={list(map(float, x))!r} "
            f"(smallest eigenvalue {min_eigenvalue:.3e})"
        )


class DomainError(PseudoPdeError, ValueError):
    """A tabulated function was queried outside the range it covers."""


class ExtrapolationError(DomainError):
    """A grid function was queried outside its node hull."""


class RankDeficientError(PseudoPdeError, ArithmeticError):
    """The regression design is singular even after ridge regularisation."""

    def __init__(self, condition_number, t_index=None):
        self.condition_number = condition_number
        self.t_index = t_index
        where = "" if t_index is None else f" at slice {t_index}"
        super().__init__(
            f"regression design is rank deficient{where} "
            f"(condition number {condition_number:.3e})"
        )


class NonFiniteError(PseudoPdeError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class ConvergenceError(PseudoPdeError, ArithmeticError):
    """An inner iteration diverged."""

    def __init__(self, message, history=()):
        self.history = list(history)
        super().__init__(f"{message}; residual history: {self.history}")


class NodeFailureError(PseudoPdeError):
    """Some space-time nodes could not be solved; partial results are attached."""

    def __init__(self, failures, partial):
        self.failures = failures
        self.partial = partial
        listing = ", ".join(f"(s={s:g}, x={list(x)})" for s, x, _ in failures[:10])
        super().__init__(f"{len(failures)} node(s) failed: {listing}")
