"""Exception hierarchy shared by all radix_compact modules.

Every error carries a stable class name; the CLI reports that name on
stderr and maps it to exit code 2 for input problems.
"""


class RadixCompactError(Exception):
    """Base class for all errors raised by this package."""


# --- ragged batch validation ---


class MismatchedLengths(RadixCompactError):
    """token_ids and position_ids have different lengths."""


class NonMonotoneOffsets(RadixCompactError):
    """cu_seqlens is not (strictly) increasing."""


class BoundaryMismatch(RadixCompactError):
    """cu_seqlens does not start at 0 or end at the token count."""


class OverflowId(RadixCompactError):
    """A token or position id does not fit in 32 unsigned bits."""


# --- plan construction ---


class CapacityExceeded(RadixCompactError):
    """The compact token count would exceed the 32-bit index width."""


class EmptyPlan(RadixCompactError):
    """Operation requires a plan with at least one compact token."""


# --- dense row operators ---


class IndexOutOfRange(RadixCompactError):
    """A gather/scatter index points outside the source matrix."""


class ShapeMismatch(RadixCompactError):
    """Matrix shapes are inconsistent with the operation's contract."""


# --- reference model ---


class OddHeadDim(RadixCompactError):
    """Rotary embedding requires an even head dimension."""


class PlanBatchMismatch(RadixCompactError):
    """The compaction plan does not describe the given batch."""


# --- cost model ---


class DegenerateBatch(RadixCompactError):
    """Synthetic batch parameters produce a zero-token batch."""


# --- bench harness ---


class VocabTooSmall(RadixCompactError):
    """Vocabulary cannot guarantee suffix divergence for the batch size."""


class FixtureError(RadixCompactError):
    """A model or pattern fixture could not be loaded."""


class WorkerPanic(RadixCompactError):
    """The pipeline worker raised; carries the failing batch index."""

    def __init__(self, batch_index: int, message: str = ""):
        self.batch_index = batch_index
        super().__init__(f"worker failed on batch {batch_index}: {message}")
