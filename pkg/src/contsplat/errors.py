"""Exception hierarchy.

Contract violations (bad inputs, broken preconditions) derive from
``ContractError``; malformed or unreadable files derive from ``FormatError``.
The CLI maps the first family to exit code 2 and the second to exit code 1.
"""


class SplatError(Exception):
    pass


class ContractError(SplatError, ValueError):
    pass


class FormatError(SplatError, IOError):
    pass


class FormatVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class BehindCamera(ContractError):
    pass


class DimensionMismatch(ContractError):
    pass


class MaskTooSmall(ContractError):
    pass


class EmptyMask(ContractError):
    pass


class IndexOutOfRange(ContractError, IndexError):
    pass


class TooFewPoints(ContractError):
    pass


class EmptyScene(ContractError):
    pass


class ImageTooSmall(ContractError):
    pass


class FeatureFileMismatch(ContractError):
    pass


class NoViews(ContractError):
    pass


class EmptyCluster(ContractError):
    pass


class EmptyInput(ContractError):
    pass


class SamplingStalled(ContractError):
    pass


class MissingDelta(ContractError):
    pass


class BitmapMismatch(ContractError):
    pass


class OverlappingChanges(ContractError):
    pass


class NoObjects(ContractError):
    pass
