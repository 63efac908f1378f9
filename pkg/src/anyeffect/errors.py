"""Exception taxonomy.

Data errors cover ingestion problems, design errors cover infeasible
splits/folds/permutation requests. The CLI maps these onto exit codes
(config 2, data 3, degenerate design 4).
"""


class AnyEffectError(Exception):
    """Base class for all package-specific errors."""


class DataError(AnyEffectError):
    """Problems with input data (parsing, schema, degenerate samples)."""


class ParseError(DataError):
    """Malformed file content; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    """Column roles do not match the file (missing/non-binary columns)."""


class DegenerateSampleError(DataError):
    """Sample without both treatment values, or otherwise unusable."""


class DesignError(AnyEffectError):
    """Randomization design cannot be realized on the given sample."""


class SizeError(DesignError):
    """A requested split produces an empty part."""


class DegenerateSplitError(DesignError):
    """Hold-out split cannot give both treatment values to both parts."""


class FoldInfeasibleError(DesignError):
    """Fold count not realizable (e.g. more folds than clusters)."""


class DegenerateFoldError(DesignError):
    """Some training set would be single-class even after retries."""


class ShapeError(AnyEffectError):
    """Array dimensions do not match what a fitted object expects."""


class UndefinedEffectError(AnyEffectError):
    """Implied-effect formula undefined (mean prediction at 0 or 1)."""


class ConfigError(AnyEffectError):
    """Invalid run configuration (CLI/config-file layer)."""
