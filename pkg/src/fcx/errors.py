"""Exception hierarchy.

Every error raised on bad input derives from :class:`ValidationError`; the CLI
maps those to exit code 2 and :class:`TrainingDiverged` to exit code 3.
"""


class FcxError(Exception):
    pass


class ValidationError(FcxError, ValueError):
    pass


class InvalidShape(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class InvalidGeometry(ValidationError):
    pass


class InvalidLabel(ValidationError):
    pass


class NotScalar(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class InvalidDepth(ValidationError):
    pass


class InvalidWidth(ValidationError):
    pass


class FrozenNetworkError(ValidationError):
    pass


class UnsupportedVersion(ValidationError):
    pass


class CorruptCheckpoint(ValidationError):
    pass


class DegenerateFeature(ValidationError):
    pass


class TooManyPlayers(ValidationError):
    pass


class IncompatibleDecomposition(ValidationError):
    pass


class MissingSplit(ValidationError):
    pass


class TooFewNetworks(ValidationError):
    pass


class PhaseOrderError(ValidationError):
    pass


class DepthMismatch(ValidationError):
    pass


class InvalidFraction(ValidationError):
    pass


class MissingDepth(ValidationError):
    pass


class Underdetermined(ValidationError):
    pass


class InvalidSplit(ValidationError):
    pass


class UnsupportedFormat(ValidationError):
    pass


class TrainingDiverged(FcxError, RuntimeError):
    pass
