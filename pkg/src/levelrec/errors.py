"""Exception types shared across the package.

Two families matter to callers: ``DataError`` covers invalid inputs and
arguments (the CLI maps it to exit code 2), ``RuntimeFailure`` covers
failures while computing or persisting results (exit code 3).
"""


class LevelRecError(Exception):
    """Base class for every error raised by this package."""


class DataError(LevelRecError):
    """Invalid input data, file, or argument."""


class RuntimeFailure(LevelRecError):
    """Failure while computing or persisting results."""


# --- tree construction ---------------------------------------------------

class UnknownParent(DataError):
    """A node references a parent_id that does not exist."""


class CycleDetected(DataError):
    """The parent relation contains a cycle."""


class LevelMismatch(DataError):
    """A declared level is inconsistent with the node's parent depth."""


class DuplicateNode(DataError):
    """The same poi_id appears more than once in the profile input."""


class UnknownNode(DataError):
    """A poi_id does not exist in the tree."""


class LevelOutOfRange(DataError):
    """A level index is outside 1..L."""


# --- ingestion and dataset protocol --------------------------------------

class ParseError(DataError):
    """A line of an input file could not be parsed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class UnknownPoi(DataError):
    """An event references a POI absent from the tree."""


class UnknownUser(DataError):
    """A user_id is absent from the user universe."""


class EmptyAfterFilter(DataError):
    """Sparsity filtering removed every event of some level."""


class WindowTooLarge(DataError):
    """Train plus test windows do not leave room for a validation slice."""


class InvalidConfig(DataError):
    """A configuration value is missing, malformed, or out of range."""


# --- features and geometry ------------------------------------------------

class UnknownAttribute(DataError):
    """A decision rule references an attribute absent from the vocabulary."""


class DimensionMismatch(DataError):
    """Matrix shapes are inconsistent."""


class MissingCoordinates(DataError):
    """A POI required by the context graph has no coordinates."""


class IndexOutOfRange(DataError):
    """A user or POI index is outside the valid range."""


class LeafLevel(DataError):
    """The operation needs a non-leaf level."""


class LeafPoi(DataError):
    """The operation needs a POI with children."""


# --- training and scoring --------------------------------------------------

class NoNegativeAvailable(RuntimeFailure):
    """A user's positives cover the whole level; no negative can be drawn."""


class ZeroTotalScore(RuntimeFailure):
    """The interaction ratio is undefined because the total score is zero."""


# --- checkpoints ------------------------------------------------------------

class VersionMismatch(RuntimeFailure):
    """Checkpoint format version or dimensions disagree with expectations."""


class CorruptCheckpoint(RuntimeFailure):
    """Checkpoint bytes are truncated or fail the checksum."""
