"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument is outside the domain of the requested quantity."""


class RankDeficiencyError(RuntimeError):
    """Weighted design matrix is singular (or numerically so)."""


class FitFailureError(RuntimeError):
    """A local likelihood fit could not be carried out at all.

    Non-convergence within the iteration budget is *not* an error; it is
    flagged in the convergence record.  This exception covers structural
    failures such as too little effective local sample.
    """


class DatasetError(ValueError):
    """Input CSV failed validation; message carries the offending row."""
