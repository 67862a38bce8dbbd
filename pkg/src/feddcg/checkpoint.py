"""Checkpointing of trained state in a small binary format.

Each checkpoint is a directory: one file per group network, one for the
prompt bank (including aggregation histories), and a JSON metadata file
carrying everything needed to rebuild an inference model (round, stub
seed, dimensions, temperatures). Payloads are little-endian f32 with magic
"FDCP"; training math is float64, so save/load round trips through f32 and
only the f32 image of the state is preserved.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import TextEncoderStub
from .errors import StoreCorruptionError, StoreDataError, StoreFormatError
from .infer import InferenceModel, make_inference_model
from .model import PARAM_FIELDS, PromptBank, PromptNetParams
from .store import _Reader

MAGIC = b"FDCP"
VERSION = 1
KIND_NET = 1
KIND_BANK = 2


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_f32(reader: _Reader, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    raw = reader.take(count * 4)
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise StoreDataError("checkpoint payload contains non-finite values")
    return arr


def _check_finite(name: str, arr: np.ndarray) -> None:
    # non-finite state is a data error (exit 2), not an API misuse
    if not np.all(np.isfinite(arr)):
        raise StoreDataError(f"{name} contains non-finite values")


def serialize_net(params: PromptNetParams) -> bytes:
    for name in PARAM_FIELDS:
        _check_finite(name, getattr(params, name))
    params.validate()
    header = MAGIC + struct.pack(
        "<IIIIII", VERSION, KIND_NET, params.head_count, params.l_p, params.d_h, params.token_dim
    )
    return header + b"".join(_f32_bytes(getattr(params, name)) for name in PARAM_FIELDS)


def serialize_bank(bank: PromptBank) -> bytes:
    _check_finite("global_prompt", bank.global_prompt)
    for d, p in enumerate(bank.domain_prompts):
        _check_finite(f"domain_prompts[{d}]", p)
    for d, hist in enumerate(bank.prompt_history):
        for j, v in enumerate(hist):
            _check_finite(f"prompt_history[{d}][{j}]", v)
    bank.validate()
    l_g, token_dim = bank.global_prompt.shape
    l_d = bank.domain_prompts[0].shape[0] if bank.domain_prompts else 0
    header = MAGIC + struct.pack(
        "<IIIIII", VERSION, KIND_BANK, bank.num_domains, l_g, l_d, token_dim
    )
    body = [_f32_bytes(bank.global_prompt)]
    body += [_f32_bytes(p) for p in bank.domain_prompts]
    for hist in bank.prompt_history:
        body.append(struct.pack("<I", len(hist)))
        body += [_f32_bytes(v) for v in hist]
    return header + b"".join(body)


def _open_reader(path: Path, kind: int) -> tuple[_Reader, tuple[int, int, int, int]]:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StoreDataError(f"failed reading checkpoint {path}: {exc}") from exc
    reader = _Reader(data)
    magic = reader.take(4)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    version = reader.u32()
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    found = reader.u32()
    if found != kind:
        raise StoreFormatError(f"{path}: kind {found}, expected {kind}")
    dims = (reader.u32(), reader.u32(), reader.u32(), reader.u32())
    return reader, dims


def _finish(reader: _Reader, path: Path) -> None:
    if reader.pos != len(reader.data):
        raise StoreCorruptionError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")


def save_net(params: PromptNetParams, path: str | Path) -> None:
    Path(path).write_bytes(serialize_net(params))


def load_net(path: str | Path) -> PromptNetParams:
    path = Path(path)
    reader, (head_count, l_p, d_h, token_dim) = _open_reader(path, KIND_NET)
    shapes = {
        "query": (l_p, d_h),
        "w_k": (token_dim, d_h),
        "w_v": (token_dim, d_h),
        "w_o": (d_h, d_h),
        "mlp_w1": (d_h, d_h),
        "mlp_b1": (d_h,),
        "mlp_w2": (d_h, token_dim),
        "mlp_b2": (token_dim,),
    }
    fields = {name: _read_f32(reader, shapes[name]) for name in PARAM_FIELDS}
    _finish(reader, path)
    params = PromptNetParams(**fields, head_count=head_count)
    params.validate()
    return params


def save_bank(bank: PromptBank, path: str | Path) -> None:
    Path(path).write_bytes(serialize_bank(bank))


def load_bank(path: str | Path) -> PromptBank:
    path = Path(path)
    reader, (num_domains, l_g, l_d, token_dim) = _open_reader(path, KIND_BANK)
    global_prompt = _read_f32(reader, (l_g, token_dim))
    domain_prompts = [_read_f32(reader, (l_d, token_dim)) for _ in range(num_domains)]
    history = []
    for _ in range(num_domains):
        count = reader.u32()
        history.append([_read_f32(reader, (l_d, token_dim)) for _ in range(count)])
    _finish(reader, path)
    bank = PromptBank(
        global_prompt=global_prompt, domain_prompts=domain_prompts, prompt_history=history
    )
    bank.validate()
    return bank


def save_checkpoint(
    directory: str | Path,
    round_index: int,
    group_nets: dict[int, PromptNetParams],
    bank: PromptBank,
    stub: TextEncoderStub,
    tau: float,
    tau_w: float,
    fixed_global_weight: float | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for d in sorted(group_nets):
        save_net(group_nets[d], directory / f"group_net_{d}.fdcp")
    save_bank(bank, directory / "prompt_bank.fdcp")
    meta = {
        "round": round_index,
        "num_domains": len(group_nets),
        "stub_seed": stub.seed,
        "token_dim": stub.token_dim,
        "dim": stub.dim,
        "tau": tau,
        "tau_w": tau_w,
        "fixed_global_weight": fixed_global_weight,
    }
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict, dict[int, PromptNetParams], PromptBank]:
    directory = Path(directory)
    meta_path = directory / "model.json"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise StoreDataError(f"failed reading {meta_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"{meta_path}: invalid JSON: {exc}") from exc
    group_nets = {
        d: load_net(directory / f"group_net_{d}.fdcp") for d in range(meta["num_domains"])
    }
    bank = load_bank(directory / "prompt_bank.fdcp")
    if len(bank.domain_prompts) != meta["num_domains"]:
        raise StoreCorruptionError(f"{directory}: bank domain count disagrees with metadata")
    return meta, group_nets, bank


def load_inference_model(
    directory: str | Path,
    class_token_embeddings: np.ndarray,
    fixed_global_weight: float | None = None,
) -> InferenceModel:
    """Rebuild an inference model from a checkpoint and a class token set.

    The stub is reconstructed from the recorded seed, so the checkpoint is
    evaluable against any store sharing the training store's geometry.
    """
    meta, group_nets, bank = load_checkpoint(directory)
    stub = TextEncoderStub.create(meta["stub_seed"], meta["token_dim"], meta["dim"])
    override = fixed_global_weight if fixed_global_weight is not None else meta.get(
        "fixed_global_weight"
    )
    return make_inference_model(
        group_nets,
        bank,
        stub,
        class_token_embeddings,
        tau=meta["tau"],
        tau_w=meta["tau_w"],
        fixed_global_weight=override,
    )
