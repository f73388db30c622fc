"""
Error taxonomy for the zero-shot intent pipeline
Each error carries the exit code the CLI reports for it
"""


class ZIntentError(Exception):
    """Base class for every error raised by this package"""

    exit_code = 4


class DimensionError(ZIntentError, ValueError):
    """Operand shapes do not fit together"""


class EmptyInputError(ZIntentError, ValueError):
    """An utterance, sentence or split has no content"""


class DegenerateVectorError(ZIntentError, ValueError):
    """A zero vector reached normalization or cosine similarity"""


class NonFiniteError(ZIntentError, ArithmeticError):
    """A numeric operation produced NaN or Inf"""


class LabelIndexError(ZIntentError, IndexError):
    """A class label or token id is outside its range"""


class ConfigError(ZIntentError):
    """Invalid configuration value or combination"""

    exit_code = 2


class SpecError(ConfigError):
    """Invalid corpus spec or sampling request"""


class CoverageError(ConfigError):
    """Test intents are missing from the embedding database"""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"test intents absent from database: {self.missing}")


class DependencyError(ZIntentError):
    """A required file or upstream model is missing"""

    exit_code = 3


class StaleDatabaseError(DependencyError):
    """Embedding database was built by a different extraction pipeline"""


class FormatError(DependencyError):
    """File is not in a readable format or has the wrong version"""
