"""Exception hierarchy shared across the engine."""


class PrmSearchError(Exception):
    """Base class for every error raised by this package."""


class GrammarError(PrmSearchError, ValueError):
    pass


# gateway
class RemoteUnavailable(PrmSearchError):
    """Transport kept failing after all retries."""


class ProtocolError(PrmSearchError):
    """The endpoint answered, but not with something we can use."""


class TemplateError(PrmSearchError, KeyError):
    pass


class ScoringError(PrmSearchError):
    """A critique call failed; ``partial`` holds the scores gathered so far."""

    def __init__(self, message, partial=()):
        super().__init__(message)
        self.partial = list(partial)


# search
class ExpansionError(PrmSearchError):
    pass


# selection
class InsufficientSamples(PrmSearchError, ValueError):
    pass


class EmptyCorpus(PrmSearchError, ValueError):
    pass


# datagen
class AlignmentError(PrmSearchError, ValueError):
    pass


class InjectionFailed(PrmSearchError):
    pass


class SegmentationError(PrmSearchError):
    pass


class ExportError(PrmSearchError, OSError):
    pass


# inference
class SamplingError(PrmSearchError):
    pass


# cli
class ConfigError(PrmSearchError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path
