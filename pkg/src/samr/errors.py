"""Exception hierarchy. CLI exit codes are attached to the top-level kinds."""


class SamrError(Exception):
    exit_code = 1


class ConfigError(SamrError, ValueError):
    exit_code = 1


class ValidationError(SamrError, ValueError):
    exit_code = 3


class ArchiveError(SamrError, OSError):
    exit_code = 2


class HeaderError(ArchiveError):
    """Header missing, not JSON, or missing required keys."""


class PayloadLengthError(ArchiveError):
    """Payload byte count disagrees with the header shape."""


class RoleShapeError(ArchiveError):
    """Shape or dtype inconsistent with the declared semantic role."""


class CheckpointError(SamrError):
    exit_code = 2


class NumericalError(SamrError, FloatingPointError):
    exit_code = 4


class ManipulationError(SamrError, ValueError):
    exit_code = 3
