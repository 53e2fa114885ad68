"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: argument/parse/metric errors are
usage problems (exit 2), infeasible-gamma errors mark the feasibility
boundary (exit 3, so sweep scripts can detect it), everything else is a
numeric/runtime failure (exit 1).
"""


class PcpcaError(Exception):
    """Base class for all package-specific errors."""


class CsvParseError(PcpcaError, ValueError):
    """Malformed CSV input. Carries 1-based ``row`` and ``col`` when known."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class InfeasibleGammaError(PcpcaError):
    """The contrast weight gamma violates a feasibility constraint."""


class RankDeficiencyError(InfeasibleGammaError):
    """A requested component has no positive variance left at this gamma."""


class NumericError(PcpcaError):
    """Non-finite values or a numerically impossible linear-algebra state."""


class NonConvergenceError(PcpcaError):
    """Iterative fitting failed pathologically. Carries the fit trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SamplerStuckError(PcpcaError):
    """MCMC chain accepted no proposals during the whole burn-in."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MetricUndefinedError(PcpcaError, ValueError):
    """A requested metric is undefined for the given inputs."""
