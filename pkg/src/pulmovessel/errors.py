"""Exception types raised across the package."""


class VesselError(Exception):
    """Base class for every error raised by pulmovessel."""


class ValidationError(VesselError, ValueError):
    """Bad inputs: caught by the CLI and mapped to exit code 1."""


class FormatError(ValidationError):
    pass


class UnsupportedDatatypeError(ValidationError):
    pass


class CorruptFileError(ValidationError):
    pass


class InvalidLabelError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class EmptyMaskError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class InvalidMaskError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class InconsistentSkeletonError(ValidationError):
    pass


class GenerationError(VesselError):
    pass


class WriteError(VesselError, OSError):
    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"cannot write {self.path}: {reason}")
