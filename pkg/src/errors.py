class QamvsError(Exception):
    """Base class for every error raised by the summarization engine."""


class DimensionError(QamvsError, ValueError):
    pass


class EmptySupportError(QamvsError, ValueError):
    pass


class ContractError(QamvsError):
    pass


class EpisodeCompleteError(ContractError):
    pass


class GraphStateError(QamvsError, RuntimeError):
    pass


class EvaluationError(QamvsError, ArithmeticError):
    pass


class DegenerateInputError(QamvsError, ValueError):
    pass


class FormatError(QamvsError):
    """Malformed on-disk artifact. Carries the offending path and field."""

    def __init__(self, message, path=None, field=None):
        self.path = str(path) if path is not None else None
        self.field = field
        where = []
        if self.path:
            where.append(f"path={self.path}")
        if field:
            where.append(f"field={field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class BundleFormatError(FormatError):
    pass


class ModelFormatError(FormatError):
    pass
