"""Exception hierarchy shared by every pipeline stage."""


class SurveyError(Exception):
    """Root of all pipeline errors."""


# Backend gateway
class TemplateMissing(SurveyError):
    pass


class BindingIncomplete(SurveyError):
    pass


class EmptyText(SurveyError, ValueError):
    pass


class TransportError(SurveyError):
    """Transient transport failure; retried by the gateway."""


class BackendFailure(SurveyError):
    pass


class TransportExhausted(BackendFailure):
    def __init__(self, attempts: int, last_error: Exception | None = None):
        super().__init__(f"transport failed after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class BudgetExceeded(BackendFailure):
    pass


class EmptyReply(BackendFailure):
    pass


class ParseFailedAfterRepairs(BackendFailure):
    def __init__(self, calls: int, last_error: str):
        super().__init__(f"could not parse structured reply after {calls} calls: {last_error}")
        self.calls = calls
        self.last_error = last_error


# Corpus store
class NotFound(SurveyError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class AmbiguousTitle(SurveyError):
    pass


class UnknownPaper(NotFound):
    pass


class EmptyQuery(SurveyError, ValueError):
    pass


class DuplicateId(SurveyError):
    pass


class CorpusFormatError(SurveyError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


# Card engine
class CardExtractionFailed(SurveyError):
    pass


class PoolEmpty(SurveyError):
    pass


class DuplicateKeyword(SurveyError):
    pass


# Outline engine
class MalformedOutline(SurveyError):
    pass


class NoSeeds(SurveyError):
    pass


# Evaluation
class ScoreOutOfRange(SurveyError):
    pass


class UnparseableVerdict(SurveyError):
    pass


class EmptyClaims(SurveyError, ValueError):
    pass


class LengthMismatch(SurveyError, ValueError):
    pass


class MissingTopicData(SurveyError):
    pass


# CLI / run management
class RunLocked(SurveyError):
    pass


class StageFailed(SurveyError):
    pass
