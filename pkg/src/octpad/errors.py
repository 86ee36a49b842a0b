"""Exception hierarchy shared by all octpad modules."""


class OctPadError(Exception):
    """Base class for all octpad errors."""


class ConfigError(OctPadError):
    """A configuration object violates its invariants."""


class ShapeMismatchError(OctPadError):
    """An array has the wrong shape for the requested operation."""


class MissingSliceError(OctPadError):
    """A PNG stack is missing one or more B-scan files."""


class MetaError(OctPadError):
    """Sample metadata is missing or unreadable."""


class SchemaError(OctPadError):
    """A serialized record violates the on-disk schema."""


class DuplicateIdError(OctPadError):
    """Two manifest entries share the same sample id."""


class DomainError(OctPadError):
    """An argument is outside the operation's domain (bad index, empty input)."""


class TooSmallError(OctPadError):
    """An image is smaller than the requested patch size."""


class NoForegroundError(OctPadError):
    """No foreground was detected; no patches can be produced."""


class LabelError(OctPadError):
    """A ground-truth mask is not one-hot or labels are inconsistent."""


class ContractViolationError(OctPadError):
    """A caller broke an input contract (e.g. PA samples in a Bonafide-only step)."""


class DegenerateDatasetError(OctPadError):
    """The dataset lacks one of the two classes required for classifier training."""


class InsufficientGroupsError(OctPadError):
    """Fewer distinct materials/subjects than requested cross-validation folds."""


class CheckpointError(OctPadError):
    """A checkpoint file is corrupt or has an unsupported version."""
