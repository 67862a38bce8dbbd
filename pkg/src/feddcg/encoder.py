"""Frozen text-encoder stub: mean-pool, fixed projection, L2-normalize.

The stub plays the role of a pretrained text encoder at desk scale. It is
frozen (never trained) but differentiable with respect to the prompt tokens
fed into it, which is the only property the training loops rely on. The
projection is a seeded random matrix with orthonormalized columns, so the
map from token space to embedding space is an isometry on its row space and
cosine geometry survives the projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError

# Sub-stream tag so the projection draw never collides with other consumers
# of the same master seed (synthetic generator, parameter init, sampling).
_PROJECTION_STREAM = 0x50524F4A


def text_projection(seed: int, token_dim: int, dim: int) -> np.ndarray:
    """Build the frozen [token_dim x dim] projection with orthonormal columns.

    Deterministic in (seed, token_dim, dim). Requires token_dim >= dim,
    otherwise the columns cannot be mutually orthonormal.
    """
    if dim < 1 or token_dim < dim:
        raise ValueError(
            f"projection needs token_dim >= dim >= 1, got token_dim={token_dim} dim={dim}"
        )
    rng = np.random.default_rng([_PROJECTION_STREAM, seed])
    raw = rng.normal(size=(token_dim, dim))
    q, r = np.linalg.qr(raw)
    # Fix the sign convention so the factorization is unique.
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray(q * signs)


@dataclass
class TextEncoderStub:
    """Frozen projection from token space to the shared embedding space."""

    projection: np.ndarray
    seed: int = 0

    @classmethod
    def create(cls, seed: int, token_dim: int, dim: int) -> "TextEncoderStub":
        return cls(projection=text_projection(seed, token_dim, dim), seed=seed)

    @property
    def token_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]


def encode_text(
    stub: TextEncoderStub,
    prompt_tokens: np.ndarray,
    class_tokens: np.ndarray,
) -> np.ndarray:
    """Encode a (prompt tokens, class tokens) sequence into a unit vector.

    Mean-pools the concatenated token sequence (prompt rows first, class
    rows after), applies the frozen projection, and L2-normalizes. The
    output therefore has unit norm and is invariant to positive scaling of
    the whole token sequence.
    """
    feature, _ = encode_text_cached(stub, prompt_tokens, class_tokens)
    return feature


def encode_text_cached(
    stub: TextEncoderStub,
    prompt_tokens: np.ndarray,
    class_tokens: np.ndarray,
) -> tuple[np.ndarray, "EncodeCache"]:
    """encode_text plus the intermediates needed for the backward pass."""
    prompt_tokens = np.asarray(prompt_tokens, dtype=np.float64)
    class_tokens = np.asarray(class_tokens, dtype=np.float64)
    if prompt_tokens.ndim != 2 or class_tokens.ndim != 2:
        raise ValueError("token blocks must be 2-D [rows x token_dim]")
    if prompt_tokens.shape[1] != stub.token_dim or class_tokens.shape[1] != stub.token_dim:
        raise ValueError(
            f"token width mismatch: stub expects {stub.token_dim}, got "
            f"{prompt_tokens.shape[1]} / {class_tokens.shape[1]}"
        )
    if not (np.all(np.isfinite(prompt_tokens)) and np.all(np.isfinite(class_tokens))):
        raise ValueError("token blocks must be finite")

    n_rows = prompt_tokens.shape[0] + class_tokens.shape[0]
    if n_rows == 0:
        raise ValueError("empty token sequence")
    pooled = (prompt_tokens.sum(axis=0) + class_tokens.sum(axis=0)) / n_rows
    projected = pooled @ stub.projection
    norm = float(np.linalg.norm(projected))
    if norm < 1e-12:
        raise DegenerateInputError("pooled token sequence projects to the zero vector")
    feature = projected / norm
    cache = EncodeCache(n_rows=n_rows, feature=feature, norm=norm)
    return feature, cache


@dataclass
class EncodeCache:
    n_rows: int
    feature: np.ndarray
    norm: float = field(default=1.0)


def encode_text_backward(
    stub: TextEncoderStub,
    cache: EncodeCache,
    d_feature: np.ndarray,
) -> np.ndarray:
    """Gradient of encode_text w.r.t. any single input token row.

    Every token row (prompt or class) receives the same gradient because of
    the mean pooling; callers broadcast the returned [token_dim] vector over
    the rows they actually train.
    """
    f = cache.feature
    d_projected = (d_feature - float(d_feature @ f) * f) / cache.norm
    d_pooled = stub.projection @ d_projected
    return d_pooled / cache.n_rows
