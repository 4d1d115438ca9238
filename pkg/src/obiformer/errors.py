"""Exception types raised across the package."""


class OBIFormerError(Exception):
    pass


class ConfigurationError(OBIFormerError, ValueError):
    pass


class ShapeError(OBIFormerError, ValueError):
    pass


class InputError(OBIFormerError, ValueError):
    pass


class FormatError(OBIFormerError, ValueError):
    """Malformed checkpoint, manifest or paired image."""


class IngestionError(OBIFormerError, IOError):
    pass


class ResourceError(OBIFormerError, RuntimeError):
    pass


class TrainingError(OBIFormerError, RuntimeError):
    pass
