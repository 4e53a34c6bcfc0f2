class InfeasibleError(RuntimeError):
    """The model has no feasible point (typically an unattainable ``mu0``)."""


class CertificateFailure(RuntimeError):
    """A single-level solution failed the follower re-solve check."""


class EnumerationCapError(ValueError):
    """The cost-grid product is too large for exhaustive enumeration."""
