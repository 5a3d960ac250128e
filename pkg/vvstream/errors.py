"""Exception hierarchy shared by every pipeline stage.

Errors are split by the exit code the command line reports for them:
data/format problems exit with 2, pipeline failures with 3.
"""


class VVStreamError(Exception):
    """Base class for all errors raised by the streaming pipeline."""

    exit_code = 3


class DataError(VVStreamError):
    """Input data could not be read or did not match its schema."""

    exit_code = 2


class PipelineError(VVStreamError):
    """A pipeline stage failed while processing valid input."""

    exit_code = 3


class ConfigurationError(DataError):
    pass


class DimensionError(DataError):
    pass


class FormatError(DataError):
    pass


class PlyFormatError(FormatError):
    pass


class TraceError(FormatError):
    pass


class ReportError(DataError):
    def __init__(self, message, missing=()):
        self.missing = tuple(missing)
        if self.missing:
            message = f"{message}: missing columns {', '.join(self.missing)}"
        super().__init__(message)


class ScriptError(DataError):
    """Scene script could not be parsed; carries the line and field path."""

    def __init__(self, message, path=None, line=None, field=None):
        self.path = path
        self.line = line
        self.field = field
        location = str(path) if path else '<script>'
        if line is not None:
            location += f':{line}'
        if field:
            location += f": field '{field}'"
        super().__init__(f'{location}: {message}')


class ManifestError(DataError):
    pass


class StreamError(DataError):
    """A recorded frame is missing from its camera stream."""

    def __init__(self, message, camera_id, sequence_number):
        self.camera_id = camera_id
        self.sequence_number = sequence_number
        super().__init__(f'camera {camera_id} frame {sequence_number}: {message}')


class CalibrationDegenerateError(PipelineError):
    pass


class NotCalibratedError(PipelineError):
    pass


class EmptyCloudError(PipelineError):
    pass


class ProtocolError(PipelineError):
    """Malformed wire data; `offset` is the byte position of the fault."""

    def __init__(self, message, offset=0):
        self.reason = message
        self.offset = offset
        super().__init__(f'{message} (at byte {offset})')


class SessionAbortError(PipelineError):
    pass
