"""Exception hierarchy shared by every layer of the store."""


class MinuetError(Exception):
    """Base class for all errors raised by this package."""


class OutOfRange(MinuetError):
    """A minitransaction item addresses bytes outside the memnode's space."""


class Unreachable(MinuetError):
    """A memnode (or the snapshot service) did not answer within the timeout."""


class FetchFailed(Unreachable):
    """A transactional fetch could not be completed."""


class RetriesExhausted(MinuetError):
    """Persistent contention: the retry budget ran out without a commit."""


class TxnAborted(MinuetError):
    """The dynamic transaction is aborted and accepts no further operations.

    ``failed_refs`` names the read-set entries whose validation failed, when
    the abort came from validation rather than an explicit ``abort()``.
    """

    def __init__(self, msg="transaction aborted", failed_refs=()):
        super().__init__(msg)
        self.failed_refs = list(failed_refs)


class OutOfMemory(MinuetError):
    """No free node slot is left anywhere in the cluster."""


class DoubleFree(MinuetError):
    """The slot being freed is not currently allocated."""


class EntryTooLarge(MinuetError):
    """Key or value exceeds its limit, or the entry cannot fit a node slot."""


class UnknownSnapshot(MinuetError):
    """The snapshot id does not name any known snapshot."""


class SnapshotRetired(MinuetError):
    """The snapshot id is below the garbage-collection watermark."""


class MonotonicityViolation(MinuetError):
    """Attempt to move the lowest-snapshot watermark backwards."""


class BranchLimitExceeded(MinuetError):
    """Creating this branch would exceed the snapshot's branching bound."""


class CatalogFull(MinuetError):
    """The snapshot catalog has no room for another entry."""


class ConfigError(MinuetError):
    """The cluster configuration is invalid."""


class BindFailure(MinuetError):
    """A listener could not bind its configured address."""


class MalformedMessage(MinuetError):
    """A wire frame could not be parsed."""


class WorkloadError(MinuetError):
    """The workload specification is invalid."""


class HistoryTooLarge(MinuetError):
    """The history's concurrency window exceeds the checkable bound."""


class UnknownScenario(MinuetError):
    """No built-in simulation scenario has that name."""
