"""Directory-tree census and store export.

Datasets are laid out root/domain/class/image-file. The census is strict:
every (domain, class) cell the caller names must exist as a directory, and
a missing cell fails the export up front with the full list of absentees,
not just the first. Image files inside a cell are taken in sorted name
order, hidden files skipped, so the same tree always exports the same
bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import DEFAULT_ENCODER, resolve_encoder
from .errors import ExportError
from .fdcg import write_store_bytes


@dataclass
class ExportSpec:
    """Everything one export run needs."""

    root: str | Path
    classes: list[str]
    domains: list[str]
    out: str | Path
    encoder: str = DEFAULT_ENCODER
    l_tok: int = 4
    device: str = "cpu"
    # offline-encoder widths; a real backbone has fixed ones
    dim: int | None = None
    token_dim: int | None = None

    def validate(self) -> None:
        if not self.classes or not self.domains:
            raise ExportError("class and domain lists must be nonempty")
        if len(set(self.classes)) != len(self.classes):
            raise ExportError("class list contains duplicates")
        if len(set(self.domains)) != len(self.domains):
            raise ExportError("domain list contains duplicates")
        if self.l_tok < 1:
            raise ExportError("l_tok must be >= 1")


def census(root: str | Path, domains: list[str], classes: list[str]) -> dict:
    """Map (domain, class) to the sorted image files in that cell.

    Raises ExportError listing every missing directory if any cell is
    absent.
    """
    root = Path(root)
    if not root.is_dir():
        raise ExportError(f"dataset root {root} is not a directory")
    missing = []
    cells: dict[tuple[str, str], list[Path]] = {}
    for domain in domains:
        for cls in classes:
            cell = root / domain / cls
            if not cell.is_dir():
                missing.append(f"{domain}/{cls}")
                continue
            files = sorted(
                p for p in cell.iterdir()
                if p.is_file() and not p.name.startswith(".")
            )
            cells[(domain, cls)] = files
    if missing:
        raise ExportError(f"missing dataset directories: {', '.join(missing)}")
    return cells


def _fit_tokens(rows: np.ndarray, l_tok: int) -> np.ndarray:
    """Truncate or zero-pad a [n, token_dim] block to exactly l_tok rows."""
    if rows.shape[0] >= l_tok:
        return rows[:l_tok]
    pad = np.zeros((l_tok - rows.shape[0], rows.shape[1]), dtype=rows.dtype)
    return np.concatenate([rows, pad], axis=0)


@dataclass
class ExportResult:
    path: Path
    num_images: int
    per_cell: dict = field(default_factory=dict)


def export_store(spec: ExportSpec) -> ExportResult:
    """Encode the dataset named by `spec` and write the store plus manifest.

    Deterministic end to end: the same tree, spec, and encoder produce
    byte-identical output. The store file is written only after the whole
    payload passes the writer's own invariant checks, and the manifest
    sidecar lands next to it as `<out>.manifest.json`.
    """
    spec.validate()
    enc = resolve_encoder(spec.encoder, spec.dim, spec.token_dim, spec.device)
    cells = census(spec.root, spec.domains, spec.classes)

    tokens = np.stack([
        _fit_tokens(enc.class_tokens(name), spec.l_tok) for name in spec.classes
    ])

    feats, img_cls, img_dom = [], [], []
    per_cell: dict[str, dict[str, int]] = {d: {} for d in spec.domains}
    for d_idx, domain in enumerate(spec.domains):
        for c_idx, cls in enumerate(spec.classes):
            files = cells[(domain, cls)]
            per_cell[domain][cls] = len(files)
            for path in files:
                feats.append(enc.encode_image(path.read_bytes()))
                img_cls.append(c_idx)
                img_dom.append(d_idx)

    embeds = (np.stack(feats) if feats
              else np.zeros((0, enc.dim), dtype="<f4"))
    payload = write_store_bytes(
        spec.classes, spec.domains, tokens,
        np.asarray(img_cls, dtype=np.int64),
        np.asarray(img_dom, dtype=np.int64),
        embeds,
    )

    out = Path(spec.out)
    manifest = {
        "dim": enc.dim,
        "token_dim": enc.token_dim,
        "l_tok": spec.l_tok,
        "num_classes": len(spec.classes),
        "num_domains": len(spec.domains),
        "num_images": len(feats),
        "class_names": list(spec.classes),
        "domains": list(spec.domains),
        "encoder": enc.name,
        "census": per_cell,
    }
    try:
        out.write_bytes(payload)
        out.with_name(out.name + ".manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ExportError(f"failed writing store to {out}: {exc}") from exc
    return ExportResult(path=out, num_images=len(feats), per_cell=per_cell)
