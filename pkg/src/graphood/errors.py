"""Exception hierarchy shared across the package."""


class GraphOODError(Exception):
    pass


class ParseError(GraphOODError):
    """A TU dataset directory is missing a file or has malformed content."""


class IntegrityError(GraphOODError):
    """Indices in a TU file reference nodes or graphs that do not exist."""


class GenerationError(GraphOODError):
    pass


class ProtocolError(GraphOODError):
    """The leave-one-class-out protocol cannot be applied to this dataset."""


class ContractError(GraphOODError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class FitError(GraphOODError):
    pass


class TrainingError(GraphOODError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ExperimentError(GraphOODError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(GraphOODError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ReportError(GraphOODError):
    pass
