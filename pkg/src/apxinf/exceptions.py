"""Exception types shared across the package."""


class EmptySelection(Exception):
    """The randomized program selected no variables; no inference possible."""


class NonConvergence(Exception):
    """An iterative solver hit its iteration cap.

    Carries the best iterate found so callers can fall back and flag.
    """

    def __init__(self, message, best_point=None, best_value=None):
        super().__init__(message)
        self.best_point = best_point
        self.best_value = best_value


class SingularDesign(Exception):
    """Active design matrix is numerically singular (cond > 1e12)."""


class Separation(Exception):
    """Logistic refit diverged (separated data)."""


class DomainViolation(Exception):
    """Point outside the open barrier domain sign(o_E) = s_E."""


class GuardExceeded(Exception):
    """Monte Carlo oracle called on an instance larger than its guard."""


class DegenerateGrid(Exception):
    """All grid weights underflowed; the scan parameter is too far out."""


class EmptyBatch(Exception):
    """Aggregation called with no records."""
