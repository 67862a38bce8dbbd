"""Export image/text encoder features into the FDCG binary store format.

Walks a root/domain/class/image dataset tree, encodes every image and class
name with a pluggable encoder, and writes the self-describing binary store
the federated simulator consumes, plus a JSON manifest sidecar. Ships with
a deterministic offline encoder so the whole pipeline runs without model
weights; `verify_store` re-reads any store file and reports every format
and data violation.
"""

from .encoders import (
    DEFAULT_ENCODER,
    OFFLINE_ENCODER,
    HashedProjectionEncoder,
    resolve_encoder,
)
from .errors import ExportError
from .export import ExportResult, ExportSpec, census, export_store
from .fdcg import VerifyReport, verify_store, write_store_bytes

__all__ = [
    "DEFAULT_ENCODER",
    "ExportError",
    "ExportResult",
    "ExportSpec",
    "HashedProjectionEncoder",
    "OFFLINE_ENCODER",
    "VerifyReport",
    "census",
    "export_store",
    "resolve_encoder",
    "verify_store",
    "write_store_bytes",
]
