"""Exception types shared across the pipeline.

Every error that aborts a stage derives from PipelineError so the CLI can
map failures to stage-tagged exit codes.
"""


class PipelineError(Exception):
    """Base class for all pipeline-level failures."""


class MalformedDocument(PipelineError):
    """A report document is not syntactically valid JSON."""


class DuplicateSampleId(PipelineError):
    """Two inputs resolved to the same sample_id; identity joins would corrupt."""


class SchemaMismatch(PipelineError):
    """A metadata table violates the documented schema (reported with row number)."""


class BadDate(PipelineError):
    """A timestamp failed to parse as an ISO-8601 day (reported with row number)."""


class EmptyTrainingSet(PipelineError):
    """Vocabulary construction was given zero reports."""


class LengthMismatch(PipelineError):
    """Two aligned vectors have different lengths."""


class TargetTooLarge(PipelineError):
    """Feature-elimination target exceeds the number of available columns."""


class ColumnMismatch(PipelineError):
    """A matrix column count does not match the model it is applied to."""


class EmptyMatrix(PipelineError):
    """A confusion matrix with zero total observations cannot be summarized."""
