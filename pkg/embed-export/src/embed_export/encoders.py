"""Pluggable feature encoders, selected by identifier string.

The default identifier names a pretrained vision-language backbone that is
an optional heavyweight dependency and is not bundled. The hashed-projection
encoder is a deterministic offline stand-in: it maps image file bytes and
class-name words to reproducible unit vectors, so the full export pipeline
(directory census, token padding, binary writing, verification) can run and
be tested without any model weights. Features from it carry no visual
semantics; swap in a real backbone for inference-quality work.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ExportError

DEFAULT_ENCODER = "vit-b16"
OFFLINE_ENCODER = "hashed-projection"


def _seed_from(tag: bytes, payload: bytes) -> int:
    # 8-byte keyed digest; the tag separates image and token streams.
    digest = hashlib.blake2b(payload, digest_size=8, person=tag).digest()
    return int.from_bytes(digest, "little")


class HashedProjectionEncoder:
    """Deterministic offline encoder: bytes in, seeded unit vectors out."""

    name = OFFLINE_ENCODER

    def __init__(self, dim: int = 512, token_dim: int = 512):
        if dim < 1 or token_dim < 1:
            raise ExportError("encoder dimensions must be positive")
        self.dim = dim
        self.token_dim = token_dim

    def encode_image(self, data: bytes) -> np.ndarray:
        """Unit-norm float32 feature, a pure function of the file bytes."""
        rng = np.random.default_rng(_seed_from(b"img-feat", data))
        vec = rng.standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).astype("<f4")

    def class_tokens(self, class_name: str) -> np.ndarray:
        """One token vector per whitespace-separated word of the name.

        Identical words share a vector across classes, like rows of a token
        embedding table. Rows are not normalized; the consumer side encodes
        them through its own text path.
        """
        words = class_name.split() or [class_name]
        rows = []
        for word in words:
            rng = np.random.default_rng(_seed_from(b"tok-embd", word.encode("utf-8")))
            rows.append(rng.standard_normal(self.token_dim))
        return np.asarray(rows, dtype="<f4")


def resolve_encoder(identifier: str, dim: int | None, token_dim: int | None,
                    device: str = "cpu"):
    """Build the encoder named by `identifier`.

    `dim`/`token_dim` configure the offline encoder; a real backbone has
    fixed output widths and would ignore them. `device` is a hint for
    backends that use one.
    """
    del device  # no bundled backend consumes it
    if identifier == OFFLINE_ENCODER:
        return HashedProjectionEncoder(dim or 512, token_dim or 512)
    if identifier == DEFAULT_ENCODER:
        raise ExportError(
            f"encoder '{identifier}' needs the optional pretrained-backbone "
            f"dependency, which is not installed; use '{OFFLINE_ENCODER}' "
            f"for the deterministic offline encoder"
        )
    raise ExportError(
        f"unknown encoder '{identifier}'; known: "
        f"'{DEFAULT_ENCODER}', '{OFFLINE_ENCODER}'"
    )
