"""Exception types shared across the toolkit."""


class LeckgError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class ParseError(LeckgError):
    """A file or payload could not be parsed at all."""

    category = "parse"


class IntegrityError(LeckgError):
    """Schema cross-references are broken (dangling id, duplicate, cycle)."""

    category = "integrity"


class UnknownCategory(LeckgError):
    category = "unknown_category"


class UnknownRelation(LeckgError):
    category = "unknown_relation"


class UnknownEntity(LeckgError):
    category = "unknown_entity"


class InvalidParams(LeckgError):
    category = "invalid_params"


class PromptConfigError(LeckgError):
    category = "prompt_config"


class TransportError(LeckgError):
    """LLM endpoint unreachable or persistently failing after retries."""

    category = "transport"


class AuthError(LeckgError):
    """Endpoint rejected the credentials; never retried."""

    category = "auth"


class RateLimited(LeckgError):
    """Endpoint kept rate-limiting after all retry attempts."""

    category = "rate_limited"


class EmptyTrainingSet(LeckgError):
    category = "empty_training_set"


class EmptyScores(LeckgError):
    category = "empty_scores"


class EmptyInput(LeckgError):
    category = "empty_input"


class EmptySeed(LeckgError):
    """Cold start produced no schema-valid seed triple."""

    category = "empty_seed"


class InsufficientEntities(LeckgError):
    category = "insufficient_entities"


class ShapeError(LeckgError):
    category = "shape"
