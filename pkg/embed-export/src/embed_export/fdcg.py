"""Writer and verifier for the FDCG binary embedding-store format.

Layout, little-endian throughout:

    bytes 0..3    magic b"FDCG"
    u32 x 7       version (1), dim, token_dim, num_classes, l_tok,
                  num_domains, num_images
    names         per class name, then per domain name:
                  u32 byte length + utf-8 bytes
    tokens        float32 block [num_classes, l_tok, token_dim], C order
    records       per image: u32 class index, u32 domain index,
                  float32 embedding [dim]

A conforming file also satisfies the data invariants checked by
`verify_store`: finite payloads, unit image rows within NORM_TOL, in-range
indices, unique class names. This module is self-contained on purpose; byte
compatibility with the consumer-side loader is proven in the interop tests,
not by sharing code with it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ExportError

MAGIC = b"FDCG"
VERSION = 1
NORM_TOL = 1e-5

_HEADER = struct.Struct("<IIIIIII")


def write_store_bytes(
    class_names: list[str],
    domains: list[str],
    class_tokens: np.ndarray,
    image_class: np.ndarray,
    image_domain: np.ndarray,
    image_embeddings: np.ndarray,
) -> bytes:
    """Serialize one store. Raises ExportError rather than emit a bad file."""
    tokens = np.ascontiguousarray(class_tokens, dtype="<f4")
    embeds = np.ascontiguousarray(image_embeddings, dtype="<f4")
    cls = np.asarray(image_class, dtype=np.int64)
    dom = np.asarray(image_domain, dtype=np.int64)

    if tokens.ndim != 3 or embeds.ndim != 2:
        raise ExportError("class_tokens must be rank 3 and image_embeddings rank 2")
    num_classes, l_tok, token_dim = tokens.shape
    num_images, dim = embeds.shape
    num_domains = len(domains)
    if num_classes != len(class_names):
        raise ExportError("token block row count disagrees with class_names")
    if len(set(class_names)) != num_classes:
        raise ExportError("class_names contains duplicates")
    if not class_names or not domains:
        raise ExportError("class and domain lists must be nonempty")
    if cls.shape != (num_images,) or dom.shape != (num_images,):
        raise ExportError("index arrays must have one entry per image")
    if not np.all(np.isfinite(tokens)) or not np.all(np.isfinite(embeds)):
        raise ExportError("payload contains non-finite values")
    if num_images:
        norms = np.linalg.norm(embeds.astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > NORM_TOL:
            raise ExportError(f"image row norm deviates from 1 by {worst:.2e}")
        if cls.min() < 0 or cls.max() >= num_classes:
            raise ExportError("image class index out of range")
        if dom.min() < 0 or dom.max() >= num_domains:
            raise ExportError("image domain index out of range")

    out = bytearray()
    out += MAGIC
    out += _HEADER.pack(VERSION, dim, token_dim, num_classes, l_tok,
                        num_domains, num_images)
    for name in list(class_names) + list(domains):
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
    out += tokens.tobytes()
    for i in range(num_images):
        out += struct.pack("<II", int(cls[i]), int(dom[i]))
        out += embeds[i].tobytes()
    return bytes(out)


@dataclass
class VerifyReport:
    """Outcome of re-reading a store file and checking every invariant."""

    path: str
    clean: bool
    problems: list[str] = field(default_factory=list)
    header: dict | None = None

    def lines(self) -> list[str]:
        status = "clean" if self.clean else "CORRUPT"
        out = [f"{self.path}: {status}"]
        if self.header:
            h = self.header
            out.append(
                f"  {h['num_images']} images, {h['num_classes']} classes x "
                f"{h['num_domains']} domains, dim {h['dim']}, "
                f"tokens {h['l_tok']} x {h['token_dim']}"
            )
        out.extend(f"  problem: {p}" for p in self.problems)
        return out


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ExportError(
                f"truncated: wanted {n} bytes for {what} at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def verify_store(path: str | Path) -> VerifyReport:
    """Re-read `path` and report every format and data violation found.

    Structural damage (bad magic, truncation, trailing bytes) stops parsing
    at the first failure; data-level checks on a structurally sound file are
    all collected.
    """
    path = Path(path)
    report = VerifyReport(path=str(path), clean=False)
    try:
        data = path.read_bytes()
    except OSError as exc:
        report.problems.append(f"unreadable: {exc}")
        return report

    cur = _Cursor(data)
    try:
        magic = cur.take(4, "magic")
        if magic != MAGIC:
            report.problems.append(f"bad magic {magic!r}, expected {MAGIC!r}")
            return report
        (version, dim, token_dim, num_classes,
         l_tok, num_domains, num_images) = _HEADER.unpack(cur.take(_HEADER.size, "header"))
        if version != VERSION:
            report.problems.append(f"unsupported version {version}")
            return report
        report.header = {
            "dim": dim, "token_dim": token_dim, "num_classes": num_classes,
            "l_tok": l_tok, "num_domains": num_domains, "num_images": num_images,
        }
        if min(dim, token_dim, num_classes, l_tok, num_domains) < 1:
            report.problems.append("header counts must be positive")
            return report

        names = []
        for i in range(num_classes + num_domains):
            length = cur.u32(f"name {i} length")
            names.append(cur.take(length, f"name {i}").decode("utf-8"))
        class_names = names[:num_classes]

        token_bytes = cur.take(num_classes * l_tok * token_dim * 4, "token block")
        record_size = 8 + 4 * dim
        record_bytes = cur.take(num_images * record_size, "image records")
        if cur.pos != len(data):
            report.problems.append(
                f"{len(data) - cur.pos} trailing bytes after payload")
            return report
    except ExportError as exc:
        report.problems.append(str(exc))
        return report
    except UnicodeDecodeError as exc:
        report.problems.append(f"undecodable name: {exc}")
        return report

    # Structurally sound; now collect every data-invariant violation.
    tokens = np.frombuffer(token_bytes, dtype="<f4")
    records = np.frombuffer(
        record_bytes,
        dtype=np.dtype([("cls", "<u4"), ("dom", "<u4"), ("emb", "<f4", (dim,))]),
    )
    if len(set(class_names)) != num_classes:
        report.problems.append("duplicate class names")
    if not np.all(np.isfinite(tokens)):
        report.problems.append("non-finite class token values")
    if not np.all(np.isfinite(records["emb"])):
        report.problems.append("non-finite image embedding values")
    elif num_images:
        norms = np.linalg.norm(records["emb"].astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > NORM_TOL:
            report.problems.append(f"image row norm deviates from 1 by {worst:.2e}")
    if num_images:
        if int(records["cls"].max()) >= num_classes:
            report.problems.append("image class index out of range")
        if int(records["dom"].max()) >= num_domains:
            report.problems.append("image domain index out of range")

    report.clean = not report.problems
    return report
