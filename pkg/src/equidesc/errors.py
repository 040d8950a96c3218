from __future__ import annotations


class EquidescError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(EquidescError, ValueError):
    """Input or contract violation; the CLI maps it to exit code 2."""


class EquidescRuntimeError(EquidescError, RuntimeError):
    """Failure while running a well-formed request; exit code 1."""


class NotARotationError(InvalidInputError):
    pass


class ShapeMismatchError(InvalidInputError):
    pass


class CorruptManifestError(EquidescRuntimeError):
    pass


class TruncatedPayloadError(EquidescRuntimeError):
    pass


class CloudFormatError(InvalidInputError):
    """Malformed point-cloud file. `location` names the line or byte offset."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        if location:
            message = f"{message} ({location})"
        super().__init__(message)


class ElementCountMismatchError(CloudFormatError):
    pass


class UnsupportedPropertyError(CloudFormatError):
    pass


class DegenerateFeatureMapError(InvalidInputError):
    pass


class TooFewPointsError(InvalidInputError):
    pass


class AmbiguousNormalError(EquidescRuntimeError):
    pass


class AmbiguousTangentError(EquidescRuntimeError):
    pass


class NonFiniteGradientError(EquidescRuntimeError):
    def __init__(self, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(f"Non-finite gradient in tensor {tensor_name!r}")


class NonFiniteLossError(EquidescRuntimeError):
    pass


class EmptyDatasetError(InvalidInputError):
    pass


class NoQualifyingPairsError(EquidescRuntimeError):
    pass


class UnknownPresetError(InvalidInputError):
    pass
