"""Exception hierarchy shared by all stages."""


class SceneDiffError(Exception):
    """Base class for all errors raised by scenediff."""


class DegenerateInput(SceneDiffError, ValueError):
    pass


class EmptyIndex(SceneDiffError, ValueError):
    pass


class InvalidDepth(SceneDiffError, ValueError):
    pass


class DimensionMismatch(SceneDiffError, ValueError):
    pass


class MissingNormals(SceneDiffError, ValueError):
    pass


class MissingColors(SceneDiffError, ValueError):
    pass


class UnsetPriors(SceneDiffError, ValueError):
    pass


class GraphMismatch(SceneDiffError, ValueError):
    pass


class EmptyGroundTruth(SceneDiffError, ValueError):
    pass


class SpecViolation(SceneDiffError, ValueError):
    pass


class ParseError(SceneDiffError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvalidRotation(SceneDiffError, ValueError):
    pass


class EmptyScene(SceneDiffError, ValueError):
    pass


class StageError(SceneDiffError, RuntimeError):
    """Wraps an error raised inside a pipeline stage, naming the stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
