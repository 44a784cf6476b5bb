"""Exception taxonomy shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad flag combination, malformed config file,
    channel plan inconsistency, checkpoint format mismatch."""


class BitstreamError(RuntimeError):
    """Malformed, truncated or otherwise unparseable bitstream."""


class ModelMismatchError(BitstreamError):
    """Bitstream was produced by a different model than the one supplied."""


class CodingError(RuntimeError):
    """Entropy-coding failure (symbol outside table range with no escape, ...)."""


class TrainingError(RuntimeError):
    """Training failure: non-finite loss term, broken corpus, ..."""


class TrainingDivergedError(TrainingError):
    """Training loss exceeded the divergence bound for too many steps."""
