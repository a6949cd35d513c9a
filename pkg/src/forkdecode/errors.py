"""Exception types shared across the package."""


class ForkdecodeError(Exception):
    """Base class for all package errors."""


class LengthMismatchError(ForkdecodeError, ValueError):
    """Vector lengths disagree with the declared vocabulary size."""


class NonFiniteInputError(ForkdecodeError, ValueError):
    """Input contains NaN or infinity where finite values are required."""


class VocabMismatchError(ForkdecodeError, ValueError):
    """Two paired models or distributions do not share a vocabulary."""


class ParseError(ForkdecodeError, ValueError):
    """A model/prompts/config file is malformed."""


class EmptyCorpusError(ForkdecodeError, ValueError):
    """N-gram fitting received no usable training tokens."""


class UnknownContextError(ForkdecodeError, LookupError):
    """Table model has no row for the context and declares no default row."""


class RemoteUnavailableError(ForkdecodeError, ConnectionError):
    """Remote logprob server could not be reached."""


class ProtocolError(ForkdecodeError, RuntimeError):
    """Remote server answered with a malformed or error body."""


class EmptyPromptSetError(ForkdecodeError, ValueError):
    """Calibration or experiment invoked with zero prompts."""


class EmptyTailError(ForkdecodeError, ValueError):
    """No score strictly exceeds the calibrated threshold; lambda undefined."""


class MetricMismatchError(ForkdecodeError, ValueError):
    """Decoder invoked with calibration data for a different metric."""


class MissingGuideLengthError(ForkdecodeError, ValueError):
    """Early-only baseline requires the guide rollout length."""


class EmptyTraceError(ForkdecodeError, ValueError):
    """Operation requires at least one decoding step."""


class AllZeroError(ForkdecodeError, ValueError):
    """Concentration measures are undefined when total mass is zero."""


class NegativeScoreError(ForkdecodeError, ValueError):
    """Concentration measures require nonnegative scores."""


class NoClassifiableTokensError(ForkdecodeError, ValueError):
    """Enrichment requires at least one planning/execution token per stream."""


class ZeroGlobalShareError(ForkdecodeError, ValueError):
    """Enrichment ratio undefined when the reference share is zero."""


class SingleClassError(ForkdecodeError, ValueError):
    """AUROC undefined when labels contain only one class."""


class IdMismatchError(ForkdecodeError, ValueError):
    """Two per-problem result sets do not cover the same problem ids."""


class ScenarioSpecError(ForkdecodeError, ValueError):
    """Synthetic scenario description violates its structural constraints."""


class TraceAuditError(ForkdecodeError, ValueError):
    """A stored trace is internally inconsistent."""
