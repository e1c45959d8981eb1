"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: bad or malformed data exits 2,
numeric failures (singular covariance, NaN loss) exit 3.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class DataError(PipelineError):
    """Malformed input: bad file, shape mismatch, empty/degenerate data."""


class FormatError(DataError):
    """A binary container failed header or payload validation."""


class NumericError(PipelineError):
    """Numerical failure: singular covariance, NaN loss, rank-0 data."""
