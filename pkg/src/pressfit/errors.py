"""Shared exception types.

Every failure mode that callers are expected to branch on gets a named
class here; anything else surfaces as a plain ValueError/RuntimeError.
"""


class DegenerateInput(ValueError):
    """Geometric input too close to singular to process (zero-norm axis, collinear 6D basis)."""


class InvalidAction(ValueError):
    """Action vector malformed: wrong shape, or non-finite entries."""


class TaskMismatch(ValueError):
    """Two world states belong to different tasks or part rosters."""


class CorruptSnapshot(ValueError):
    """Snapshot blob fails structural validation and cannot be restored."""


class NoPlan(RuntimeError):
    """The scripted expert has nothing left to do (all active parts assembled)."""


class SchemaViolation(ValueError):
    """Serialized artifact does not match its declared schema.

    Carries the offending field path when known, e.g. "observations[3][12]".
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(message if path is None else f"{message} (at {path})")


class EmptyDataset(ValueError):
    """An operation that needs at least one trajectory/timestep got none."""


class BadConfig(ValueError):
    """Configuration value out of range or internally inconsistent."""


class ShapeMismatch(ValueError):
    """Tensor operands have incompatible shapes for the requested op."""


class NotScalar(ValueError):
    """backward() called on a non-scalar tensor."""


class NonFiniteLoss(RuntimeError):
    """Training loss became NaN/Inf; the run is aborted rather than continued."""


class ExpertFailureBudgetExceeded(RuntimeError):
    """Demo collection burned through its retry budget without enough successes."""


class NoSuccessfulRollouts(RuntimeError):
    """A collect-and-infer round produced zero successful rollouts to ingest."""


class NoAnnotations(ValueError):
    """A demo offered for augmentation carries no bottleneck indices."""


class EnvMismatch(RuntimeError):
    """Replaying a stored trajectory in a fresh env diverged from its record."""


class LengthMismatch(ValueError):
    """Action and pose sequences disagree on length."""


class AugmentBudgetExceeded(RuntimeError):
    """Augmentation burned its attempt budget before producing enough snippets."""


class CheckpointMismatch(RuntimeError):
    """A checkpoint cannot drive the requested task (wrong kind or dimensions)."""


class LayoutMismatch(ValueError):
    """Datasets offered for mixing disagree on observation/action layout."""
