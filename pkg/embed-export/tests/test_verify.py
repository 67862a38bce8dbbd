"""verify_store: clean files pass, every corruption class is reported."""

import struct

import numpy as np

from embed_export import verify_store

from exporter_testlib import read_header


def _nan_offset(path):
    """Byte offset of the first embedding float of the last image record."""
    h = read_header(path)
    record = 8 + 4 * h["dim"]
    return path.stat().st_size - record + 8


def test_fresh_export_is_clean(clean_export):
    report = verify_store(clean_export)
    assert report.clean
    assert report.problems == []
    assert report.header["num_images"] == 12


def test_truncated_file_reported(clean_export, tmp_path):
    cut = tmp_path / "cut.fdcg"
    cut.write_bytes(clean_export.read_bytes()[:-7])
    report = verify_store(cut)
    assert not report.clean
    assert any("truncated" in p for p in report.problems)


def test_nan_payload_reported(clean_export, tmp_path):
    data = bytearray(clean_export.read_bytes())
    offset = _nan_offset(clean_export)
    data[offset : offset + 4] = struct.pack("<f", float("nan"))
    bad = tmp_path / "nan.fdcg"
    bad.write_bytes(bytes(data))
    report = verify_store(bad)
    assert not report.clean
    assert any("non-finite" in p for p in report.problems)


def test_trailing_bytes_reported(clean_export, tmp_path):
    padded = tmp_path / "pad.fdcg"
    padded.write_bytes(clean_export.read_bytes() + b"xx")
    report = verify_store(padded)
    assert not report.clean
    assert any("trailing" in p for p in report.problems)


def test_bad_magic_reported(tmp_path):
    bad = tmp_path / "bad.fdcg"
    bad.write_bytes(b"NOPE" + b"\x00" * 60)
    report = verify_store(bad)
    assert not report.clean
    assert any("magic" in p for p in report.problems)


def test_missing_file_reported(tmp_path):
    report = verify_store(tmp_path / "absent.fdcg")
    assert not report.clean
    assert any("unreadable" in p for p in report.problems)


def test_bad_norm_reported(clean_export, tmp_path):
    data = bytearray(clean_export.read_bytes())
    offset = _nan_offset(clean_export)
    data[offset : offset + 4] = struct.pack("<f", 5.0)
    bad = tmp_path / "norm.fdcg"
    bad.write_bytes(bytes(data))
    report = verify_store(bad)
    assert not report.clean
    assert any("norm" in p for p in report.problems)


def test_out_of_range_index_reported(clean_export, tmp_path):
    h = read_header(clean_export)
    data = bytearray(clean_export.read_bytes())
    record = 8 + 4 * h["dim"]
    # class index field of the last record
    offset = len(data) - record
    data[offset : offset + 4] = struct.pack("<I", h["num_classes"] + 9)
    bad = tmp_path / "idx.fdcg"
    bad.write_bytes(bytes(data))
    report = verify_store(bad)
    assert not report.clean
    assert any("class index" in p for p in report.problems)


def test_hand_built_single_image_file_is_clean(tmp_path):
    """Minimal store written with raw struct calls, no library code."""
    dim, token_dim, l_tok = 4, 3, 2
    payload = bytearray()
    payload += b"FDCG"
    payload += struct.pack("<IIIIIII", 1, dim, token_dim, 1, l_tok, 1, 1)
    for name in (b"cat", b"sketch"):
        payload += struct.pack("<I", len(name)) + name
    tokens = np.arange(1 * l_tok * token_dim, dtype="<f4") / 10.0
    payload += tokens.tobytes()
    payload += struct.pack("<II", 0, 0)
    payload += np.array([1.0, 0.0, 0.0, 0.0], dtype="<f4").tobytes()

    path = tmp_path / "hand.fdcg"
    path.write_bytes(bytes(payload))
    report = verify_store(path)
    assert report.clean, report.problems
    assert report.header == {
        "dim": 4, "token_dim": 3, "num_classes": 1,
        "l_tok": 2, "num_domains": 1, "num_images": 1,
    }
