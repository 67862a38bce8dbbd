"""Frozen embedding data: synthetic generation, binary I/O, client partitioning.

The store owns everything the trainer treats as immutable: L2-normalized
image embeddings, per-class token embeddings, and the domain/class metadata.
Payloads are kept in float32 (the on-disk precision) so that a save/load
round trip is exact; all training math upcasts to float64.

Binary layout (little-endian, authoritative over the JSON manifest):

    "FDCG" | u32 version=1 | u32 dim | u32 token_dim | u32 num_classes |
    u32 l_tok | u32 num_domains | u32 num_images |
    class name table | domain name table |
    class token embeddings  (num_classes * l_tok * token_dim f32) |
    image records           (num_images * [u32 class, u32 domain, dim f32])

Name tables are u32 length-prefixed UTF-8 strings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import TextEncoderStub
from .errors import (
    PartitionError,
    StoreCorruptionError,
    StoreDataError,
    StoreFormatError,
)

MAGIC = b"FDCG"
VERSION = 1

# Seed sub-stream tags for the synthetic generator.
_TOKEN_STREAM = 1
_OFFSET_STREAM = 2
_NOISE_STREAM = 3
_PARTITION_STREAM = 4

_NORM_TOL = 1e-5


@dataclass
class EmbeddingStore:
    """Immutable bundle of frozen embeddings and partition metadata."""

    dim: int
    token_dim: int
    class_names: list[str]
    domains: list[str]
    class_token_embeddings: np.ndarray  # [num_classes, l_tok, token_dim] f32
    image_embeddings: np.ndarray        # [num_images, dim] f32, unit rows
    image_class: np.ndarray             # [num_images] int64
    image_domain: np.ndarray            # [num_images] int64

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    @property
    def num_images(self) -> int:
        return int(self.image_embeddings.shape[0])

    @property
    def l_tok(self) -> int:
        return int(self.class_token_embeddings.shape[1])

    def validate(self) -> None:
        """Raise StoreDataError if any invariant is broken."""
        if self.dim < 1 or self.token_dim < 1:
            raise StoreDataError("dim and token_dim must be positive")
        if len(set(self.class_names)) != len(self.class_names):
            raise StoreDataError("class_names contains duplicates")
        if self.class_token_embeddings.shape != (self.num_classes, self.l_tok, self.token_dim):
            raise StoreDataError("class token embedding shape mismatch")
        if self.image_embeddings.shape != (self.num_images, self.dim):
            raise StoreDataError("image embedding shape mismatch")
        if not np.all(np.isfinite(self.class_token_embeddings)):
            raise StoreDataError("non-finite class token embedding")
        if not np.all(np.isfinite(self.image_embeddings)):
            raise StoreDataError("non-finite image embedding")
        if self.num_images:
            norms = np.linalg.norm(self.image_embeddings.astype(np.float64), axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > _NORM_TOL:
                raise StoreDataError(f"image row norm deviates from 1 by {worst:.2e}")
            if int(self.image_class.min()) < 0 or int(self.image_class.max()) >= self.num_classes:
                raise StoreDataError("image class index out of range")
            if int(self.image_domain.min()) < 0 or int(self.image_domain.max()) >= self.num_domains:
                raise StoreDataError("image domain index out of range")

    def equal(self, other: "EmbeddingStore") -> bool:
        """Field-by-field equality, float payloads compared exactly."""
        return (
            self.dim == other.dim
            and self.token_dim == other.token_dim
            and self.class_names == other.class_names
            and self.domains == other.domains
            and np.array_equal(self.class_token_embeddings, other.class_token_embeddings)
            and np.array_equal(self.image_embeddings, other.image_embeddings)
            and np.array_equal(self.image_class, other.image_class)
            and np.array_equal(self.image_domain, other.image_domain)
        )


@dataclass
class ClientPartition:
    """One client's slice of a store: a single domain, a class subset, owned rows."""

    client_id: int
    domain_index: int
    class_indices: np.ndarray  # sorted int64
    image_indices: np.ndarray  # int64, disjoint across clients

    @property
    def size(self) -> int:
        return int(self.image_indices.shape[0])


def _pack_names(names: list[str]) -> bytes:
    out = bytearray()
    for name in names:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
    return bytes(out)


def _image_record_dtype(dim: int) -> np.dtype:
    return np.dtype([("cls", "<u4"), ("dom", "<u4"), ("emb", "<f4", (dim,))])


def serialize_store(store: EmbeddingStore) -> bytes:
    """Produce the canonical byte representation of a store."""
    store.validate()
    header = MAGIC + struct.pack(
        "<IIIIIII",
        VERSION,
        store.dim,
        store.token_dim,
        store.num_classes,
        store.l_tok,
        store.num_domains,
        store.num_images,
    )
    tokens = np.ascontiguousarray(store.class_token_embeddings, dtype="<f4").tobytes()
    records = np.empty(store.num_images, dtype=_image_record_dtype(store.dim))
    records["cls"] = store.image_class
    records["dom"] = store.image_domain
    records["emb"] = store.image_embeddings
    return (
        header
        + _pack_names(store.class_names)
        + _pack_names(store.domains)
        + tokens
        + records.tobytes()
    )


def manifest_dict(store: EmbeddingStore) -> dict:
    return {
        "dim": store.dim,
        "token_dim": store.token_dim,
        "l_tok": store.l_tok,
        "num_classes": store.num_classes,
        "num_domains": store.num_domains,
        "num_images": store.num_images,
        "class_names": list(store.class_names),
        "domains": list(store.domains),
    }


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    """Write the binary store plus its JSON manifest sidecar.

    Validation happens before anything touches the filesystem, so a store
    with non-finite payload never produces a partial file. Writing the same
    store twice yields byte-identical output.
    """
    payload = serialize_store(store)
    path = Path(path)
    manifest = json.dumps(manifest_dict(store), indent=2, sort_keys=True) + "\n"
    try:
        path.write_bytes(payload)
        path.with_name(path.name + ".manifest.json").write_text(manifest)
    except OSError as exc:
        raise StoreDataError(f"failed writing store to {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StoreCorruptionError(
                f"file truncated: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def names(self, count: int) -> list[str]:
        out = []
        for _ in range(count):
            length = self.u32()
            out.append(self.take(length).decode("utf-8"))
        return out


def load_store(path: str | Path) -> EmbeddingStore:
    """Load a binary store, verifying format, sizes, and data invariants."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StoreDataError(f"failed reading store from {path}: {exc}") from exc

    reader = _Reader(data)
    magic = reader.take(4)
    if magic != MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32()
    if version != VERSION:
        raise StoreFormatError(f"unsupported version {version}")
    dim = reader.u32()
    token_dim = reader.u32()
    num_classes = reader.u32()
    l_tok = reader.u32()
    num_domains = reader.u32()
    num_images = reader.u32()
    if dim < 1 or token_dim < 1 or num_classes < 1 or l_tok < 1 or num_domains < 1:
        raise StoreCorruptionError("header counts must be positive")

    class_names = reader.names(num_classes)
    domains = reader.names(num_domains)

    token_bytes = reader.take(num_classes * l_tok * token_dim * 4)
    tokens = np.frombuffer(token_bytes, dtype="<f4").reshape(num_classes, l_tok, token_dim)

    record_dtype = _image_record_dtype(dim)
    record_bytes = reader.take(num_images * record_dtype.itemsize)
    if reader.pos != len(data):
        raise StoreCorruptionError(f"{len(data) - reader.pos} trailing bytes after payload")
    records = np.frombuffer(record_bytes, dtype=record_dtype)

    store = EmbeddingStore(
        dim=dim,
        token_dim=token_dim,
        class_names=class_names,
        domains=domains,
        class_token_embeddings=tokens.copy(),
        image_embeddings=np.ascontiguousarray(records["emb"]),
        image_class=records["cls"].astype(np.int64),
        image_domain=records["dom"].astype(np.int64),
    )
    try:
        store.validate()
    except StoreDataError as exc:
        raise StoreDataError(f"{path}: {exc}") from exc
    return store


def generate_synthetic(
    num_domains: int,
    num_classes: int,
    dim: int,
    token_dim: int,
    images_per_class_per_domain: int,
    domain_shift: float,
    noise: float,
    seed: int,
    l_tok: int = 4,
) -> EmbeddingStore:
    """Deterministic synthetic store with a built-in text/image correspondence.

    Class token embeddings are drawn i.i.d. from a seeded Gaussian and then
    frozen. Each class prototype is the image of its mean token under the
    frozen text projection for the same seed, which is what ties token space
    to image space (the role CLIP pretraining plays for real data): a model
    that encodes class tokens through the matching stub is near the optimal
    classifier, including for classes never seen in training. Each domain
    adds one fixed unit offset vector scaled by domain_shift, and every
    image is normalize(prototype + domain offset + Gaussian(0, noise^2)).
    """
    if num_domains < 1 or num_classes < 1 or images_per_class_per_domain < 1 or l_tok < 1:
        raise ValueError("all counts must be >= 1")
    if dim < 4:
        raise ValueError("dim must be >= 4")
    if token_dim < dim:
        raise ValueError("token_dim must be >= dim so the text projection is orthonormal")
    if domain_shift < 0 or noise < 0:
        raise ValueError("domain_shift and noise must be >= 0")

    stub = TextEncoderStub.create(seed, token_dim, dim)

    token_rng = np.random.default_rng([_TOKEN_STREAM, seed])
    tokens = token_rng.normal(size=(num_classes, l_tok, token_dim))

    mean_tokens = tokens.mean(axis=1)                      # [C, token_dim]
    prototypes = mean_tokens @ stub.projection             # [C, dim]
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    offset_rng = np.random.default_rng([_OFFSET_STREAM, seed])
    raw_offsets = offset_rng.normal(size=(num_domains, dim))
    offsets = domain_shift * raw_offsets / np.linalg.norm(raw_offsets, axis=1, keepdims=True)

    noise_rng = np.random.default_rng([_NOISE_STREAM, seed])
    per_cell = images_per_class_per_domain
    draws = noise_rng.normal(size=(num_domains, num_classes, per_cell, dim)) * noise

    images = prototypes[None, :, None, :] + offsets[:, None, None, :] + draws
    images /= np.linalg.norm(images, axis=-1, keepdims=True)

    image_domain = np.repeat(np.arange(num_domains), num_classes * per_cell)
    image_class = np.tile(np.repeat(np.arange(num_classes), per_cell), num_domains)

    store = EmbeddingStore(
        dim=dim,
        token_dim=token_dim,
        class_names=[f"class_{c:03d}" for c in range(num_classes)],
        domains=[f"domain_{d}" for d in range(num_domains)],
        class_token_embeddings=tokens.astype(np.float32),
        image_embeddings=images.reshape(-1, dim).astype(np.float32),
        image_class=image_class.astype(np.int64),
        image_domain=image_domain.astype(np.int64),
    )
    store.validate()
    return store


def subset_store(
    store: EmbeddingStore,
    domain_indices: list[int] | None = None,
    class_indices: list[int] | None = None,
) -> EmbeddingStore:
    """Restrict a store to a subset of domains and/or classes, re-indexing both.

    Token embeddings of the kept classes are preserved bit-for-bit, so a
    model trained against the parent store's stub stays consistent with any
    slice (this is how held-out-domain / unseen-class evaluations are built).
    """
    domain_indices = sorted(set(range(store.num_domains) if domain_indices is None else domain_indices))
    class_indices = sorted(set(range(store.num_classes) if class_indices is None else class_indices))
    if not domain_indices or not class_indices:
        raise ValueError("subset must keep at least one domain and one class")
    if domain_indices[0] < 0 or domain_indices[-1] >= store.num_domains:
        raise ValueError("domain index out of range")
    if class_indices[0] < 0 or class_indices[-1] >= store.num_classes:
        raise ValueError("class index out of range")

    domain_map = {old: new for new, old in enumerate(domain_indices)}
    class_map = {old: new for new, old in enumerate(class_indices)}
    keep = np.array(
        [
            int(store.image_domain[i]) in domain_map and int(store.image_class[i]) in class_map
            for i in range(store.num_images)
        ],
        dtype=bool,
    )
    new_store = EmbeddingStore(
        dim=store.dim,
        token_dim=store.token_dim,
        class_names=[store.class_names[c] for c in class_indices],
        domains=[store.domains[d] for d in domain_indices],
        class_token_embeddings=store.class_token_embeddings[class_indices].copy(),
        image_embeddings=store.image_embeddings[keep].copy(),
        image_class=np.array([class_map[int(c)] for c in store.image_class[keep]], dtype=np.int64),
        image_domain=np.array([domain_map[int(d)] for d in store.image_domain[keep]], dtype=np.int64),
    )
    new_store.validate()
    return new_store


def partition_clients(
    store: EmbeddingStore,
    clients_per_domain: int,
    classes_per_client: int,
    sampling_rate: float,
    seed: int,
) -> list[ClientPartition]:
    """Deal out clients: one domain each, disjoint class sets within a domain.

    Every domain receives exactly clients_per_domain clients. Within a
    domain the class pool is shuffled once and dealt without overlap, which
    is what keeps image ownership disjoint; each client then keeps
    floor(sampling_rate * cell size) images of each of its (domain, class)
    cells, chosen by seeded draw.
    """
    if classes_per_client < 1 or classes_per_client > store.num_classes:
        raise ValueError("classes_per_client must be in [1, num_classes]")
    if clients_per_domain < 1:
        raise ValueError("clients_per_domain must be >= 1")
    if not 0.0 < sampling_rate <= 1.0:
        raise ValueError("sampling_rate must be in (0, 1]")
    if clients_per_domain * classes_per_client > store.num_classes:
        raise PartitionError(
            f"cannot assign {clients_per_domain} disjoint clients x "
            f"{classes_per_client} classes from {store.num_classes} classes"
        )

    rng = np.random.default_rng([_PARTITION_STREAM, seed])
    cells: dict[tuple[int, int], np.ndarray] = {}
    for d in range(store.num_domains):
        for c in range(store.num_classes):
            cells[(d, c)] = np.where((store.image_domain == d) & (store.image_class == c))[0]

    partitions: list[ClientPartition] = []
    for d in range(store.num_domains):
        class_pool = rng.permutation(store.num_classes)
        for k in range(clients_per_domain):
            client_id = d * clients_per_domain + k
            assigned = np.sort(class_pool[k * classes_per_client : (k + 1) * classes_per_client])
            owned: list[np.ndarray] = []
            for c in assigned:
                cell = cells[(d, int(c))]
                if cell.size == 0:
                    raise PartitionError(
                        f"domain {store.domains[d]!r} class {store.class_names[int(c)]!r} "
                        "has no images for a required assignment"
                    )
                take = int(np.floor(sampling_rate * cell.size))
                if take > 0:
                    picked = rng.choice(cell, size=take, replace=False)
                    owned.append(np.sort(picked))
            image_indices = (
                np.concatenate(owned).astype(np.int64) if owned else np.empty(0, dtype=np.int64)
            )
            if image_indices.size == 0:
                raise PartitionError(
                    f"client {client_id} in domain {store.domains[d]!r} owns no images "
                    f"(sampling_rate={sampling_rate})"
                )
            partitions.append(
                ClientPartition(
                    client_id=client_id,
                    domain_index=d,
                    class_indices=assigned.astype(np.int64),
                    image_indices=image_indices,
                )
            )
    return partitions
