"""Exception hierarchy.

Every failure the engine can classify derives from :class:`PatchOODError`, so
batch drivers can catch one type and still report the specific cause.
"""

from __future__ import annotations


class PatchOODError(Exception):
    """Base class for all classified engine errors."""


# tensor / manifest I/O
class TensorFormatError(PatchOODError, ValueError):
    pass


class MalformedHeader(TensorFormatError):
    pass


class ShapeDataMismatch(TensorFormatError):
    pass


class UnsupportedDtype(TensorFormatError):
    pass


class IoFailure(PatchOODError, OSError):
    pass


class ManifestError(PatchOODError, ValueError):
    """Invalid manifest; carries the offending subject id and field when known."""

    def __init__(self, message: str, subject_id: str | None = None, field: str | None = None):
        self.subject_id = subject_id
        self.field = field
        where = []
        if subject_id is not None:
            where.append(f"subject {subject_id!r}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class SchemaError(ManifestError):
    pass


class MissingFile(ManifestError):
    pass


class GeometryError(ManifestError):
    pass


# numerics
class NonFiniteInput(PatchOODError, ValueError):
    pass


class DimensionMismatch(PatchOODError, ValueError):
    pass


class TooFewSamples(PatchOODError, ValueError):
    pass


class FactorizationFailure(PatchOODError, ArithmeticError):
    pass


# aggregation
class PatchLargerThanImage(PatchOODError, ValueError):
    pass


class LengthMismatch(PatchOODError, ValueError):
    pass


class UncoveredVoxel(PatchOODError, RuntimeError):
    pass


class DegenerateRange(PatchOODError, ValueError):
    pass


# baselines / metrics
class NotNormalized(PatchOODError, ValueError):
    pass


class ShapeMismatch(PatchOODError, ValueError):
    pass


class EmptyInput(PatchOODError, ValueError):
    pass


class MissingDice(PatchOODError, ValueError):
    pass


class MissingScores(PatchOODError, LookupError):
    def __init__(self, subject_ids):
        self.subject_ids = list(subject_ids)
        super().__init__("no stored scores for subject(s): " + ", ".join(self.subject_ids))
