"""Exception hierarchy shared by all patchmimic modules."""


class PatchmimicError(Exception):
    """Base class for all errors raised by this package."""


class DataError(PatchmimicError):
    """Invalid inputs: bad files, broken manifests, geometry mismatches."""


class FeatureFormatError(DataError):
    """A feature-grid file violates the on-disk format contract."""


class ManifestError(DataError):
    """A dataset manifest violates one or more record invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"manifest validation failed ({len(self.violations)} problem(s)):\n{lines}")


class NumericError(PatchmimicError):
    """Non-finite values or divergence in a numeric computation."""
