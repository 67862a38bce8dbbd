"""Exception hierarchy shared across the library."""


class FedDCGError(Exception):
    """Base class for all library-specific errors."""


class StoreFormatError(FedDCGError):
    """Bad magic or unsupported version in a binary store/checkpoint file."""


class StoreCorruptionError(FedDCGError):
    """Header and payload disagree (truncation, size mismatch)."""


class StoreDataError(FedDCGError):
    """Payload violates a data invariant (non-finite floats, bad norms, bad indices)."""


class PartitionError(FedDCGError):
    """Client partitioning cannot satisfy its contract."""


class ProtocolError(FedDCGError):
    """Federated round received updates that violate the protocol contract."""


class ContractError(FedDCGError):
    """A numeric precondition (e.g. unit norm) was violated beyond tolerance."""


class DegenerateInputError(FedDCGError):
    """An input collapses to zero where a direction is required."""


class ConfigError(FedDCGError):
    """Run configuration is missing, malformed, or inconsistent."""
