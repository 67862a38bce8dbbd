"""Command-line surface: exit codes, file outputs, determinism."""

from __future__ import annotations

import json

import pytest

from feddcg.cli import main
from feddcg.config import RunConfig, save_config
from feddcg.store import load_store


def _gen_args(out, domains=2, classes=6, dim=16, **extra):
    args = [
        "gen-synthetic",
        "--domains", str(domains),
        "--classes", str(classes),
        "--dim", str(dim),
        "--images-per-class", "4",
        "--seed", "3",
        "--out", str(out),
    ]
    for flag, value in extra.items():
        args += [f"--{flag.replace('_', '-')}", str(value)]
    return args


def _train_config(tmp_path, store_path, **overrides):
    defaults = dict(
        rounds=4,
        clients_per_domain=2,
        classes_per_client=3,
        batch_size=8,
        local_epochs=1,
        d_h=8,
        heads=2,
        seed=1,
        stub_seed=3,
        checkpoint_every=2,
        train_store=str(store_path),
        out_dir=str(tmp_path / "run"),
    )
    defaults.update(overrides)
    config = RunConfig(**defaults)
    path = tmp_path / "config.json"
    save_config(config, path)
    return config, path


def test_gen_synthetic_writes_and_prints_manifest(tmp_path, capsys):
    out = tmp_path / "toy.fdcg"
    assert main(_gen_args(out)) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["num_domains"] == 2
    assert manifest["num_classes"] == 6
    store = load_store(out)
    assert store.num_images == 2 * 6 * 4


def test_gen_synthetic_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.fdcg", tmp_path / "b.fdcg"
    assert main(_gen_args(a)) == 0
    assert main(_gen_args(b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_synthetic_rejects_zero_classes(tmp_path, capsys):
    assert main(_gen_args(tmp_path / "x.fdcg", classes=0)) == 1
    assert "usage error" in capsys.readouterr().err


def test_gen_synthetic_missing_required_flag(tmp_path, capsys):
    assert main(["gen-synthetic", "--domains", "2"]) == 1


def test_train_writes_run_directory(tmp_path, capsys):
    store_path = tmp_path / "toy.fdcg"
    assert main(_gen_args(store_path)) == 0
    capsys.readouterr()
    config, config_path = _train_config(tmp_path, store_path)
    assert main(["train", str(config_path)]) == 0

    out = tmp_path / "run"
    assert (out / "config.json").exists()
    assert (out / "summary.json").exists()
    lines = (out / "rounds.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    assert [r["stage"] for r in records] == ["A", "B", "A", "B"]
    assert [r["round"] for r in records] == [0, 1, 2, 3]
    # checkpoint_every=2 over 4 rounds: rounds 2 and 4, final repeat collapses
    names = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert names == ["round_00002", "round_00004"]
    summary = json.loads(capsys.readouterr().out)
    assert summary["rounds"] == 4
    assert summary["clients"] == 4


def test_train_rounds_zero_writes_initial_checkpoint(tmp_path, capsys):
    store_path = tmp_path / "toy.fdcg"
    assert main(_gen_args(store_path)) == 0
    _, config_path = _train_config(tmp_path, store_path, rounds=0)
    assert main(["train", str(config_path)]) == 0
    out = tmp_path / "run"
    assert (out / "rounds.jsonl").read_text() == ""
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["round_00000"]


def test_train_is_deterministic_modulo_wall_clock(tmp_path, capsys):
    store_path = tmp_path / "toy.fdcg"
    assert main(_gen_args(store_path)) == 0

    blobs = []
    logs = []
    for name in ("run_a", "run_b"):
        _, config_path = _train_config(
            tmp_path, store_path, out_dir=str(tmp_path / name)
        )
        assert main(["train", str(config_path)]) == 0
        out = tmp_path / name
        final = out / "checkpoints" / "round_00004"
        blob = b"".join(
            p.read_bytes() for p in sorted(final.iterdir()) if p.suffix == ".fdcp"
        )
        blobs.append(blob)
        records = [json.loads(l) for l in (out / "rounds.jsonl").read_text().splitlines()]
        for r in records:
            r.pop("wall_ms")
        logs.append(records)
    assert blobs[0] == blobs[1]
    assert logs[0] == logs[1]


def test_train_requires_store_path(tmp_path, capsys):
    config = RunConfig(rounds=1, out_dir=str(tmp_path / "run"))
    path = tmp_path / "config.json"
    save_config(config, path)
    assert main(["train", str(path)]) == 2
    assert "train_store" in capsys.readouterr().err


def test_train_corrupt_store_is_data_error(tmp_path, capsys):
    store_path = tmp_path / "broken.fdcg"
    store_path.write_bytes(b"FDCGgarbage")
    _, config_path = _train_config(tmp_path, store_path)
    assert main(["train", str(config_path)]) == 2


def test_train_missing_config_file(tmp_path, capsys):
    assert main(["train", str(tmp_path / "absent.json")]) == 2


def test_eval_all_aggregators(tmp_path, capsys):
    store_path = tmp_path / "toy.fdcg"
    assert main(_gen_args(store_path)) == 0
    _, config_path = _train_config(tmp_path, store_path)
    assert main(["train", str(config_path)]) == 0
    capsys.readouterr()
    checkpoint = tmp_path / "run" / "checkpoints" / "round_00004"

    sample_counts = []
    for agg in ("domain_guided", "average", "uncertainty"):
        out_json = tmp_path / f"{agg}.json"
        code = main([
            "eval",
            "--checkpoint", str(checkpoint),
            "--store", str(store_path),
            "--aggregator", agg,
            "--out", str(out_json),
        ])
        assert code == 0
        table = capsys.readouterr().out
        assert f"aggregator: {agg}" in table
        results = json.loads(out_json.read_text())
        assert set(results["per_domain"]) == {"domain_0", "domain_1"}
        sample_counts.append(results["n_samples"])
    assert len(set(sample_counts)) == 1


def test_eval_class_subset(tmp_path, capsys):
    store_path = tmp_path / "toy.fdcg"
    assert main(_gen_args(store_path)) == 0
    _, config_path = _train_config(tmp_path, store_path)
    assert main(["train", str(config_path)]) == 0
    capsys.readouterr()
    checkpoint = tmp_path / "run" / "checkpoints" / "round_00004"
    out_json = tmp_path / "subset.json"
    assert main([
        "eval", "--checkpoint", str(checkpoint), "--store", str(store_path),
        "--classes", "0,2", "--out", str(out_json),
    ]) == 0
    results = json.loads(out_json.read_text())
    # 2 domains x 2 classes x 4 images per cell
    assert results["n_samples"] == 16


def test_eval_rejects_unknown_aggregator(tmp_path, capsys):
    assert main([
        "eval", "--checkpoint", "x", "--store", "y", "--aggregator", "vote",
    ]) == 1


def test_eval_rejects_malformed_classes(tmp_path, capsys):
    store_path = tmp_path / "toy.fdcg"
    assert main(_gen_args(store_path)) == 0
    _, config_path = _train_config(tmp_path, store_path)
    assert main(["train", str(config_path)]) == 0
    checkpoint = tmp_path / "run" / "checkpoints" / "round_00004"
    assert main([
        "eval", "--checkpoint", str(checkpoint), "--store", str(store_path),
        "--classes", "0,two",
    ]) == 1


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "0", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_gradcheck_detects_broken_gradients():
    # corruption hook: perturb one analytic gradient entry and the check
    # must fail loudly rather than average the error away
    from feddcg.gradcheck import run_gradcheck

    def flip_first(vec):
        out = vec.copy()
        out[0] += 0.1
        return out

    report = run_gradcheck([0, 1], corrupt=flip_first)
    assert not report["passed"]


def test_gradcheck_rejects_zero_trials(capsys):
    assert main(["gradcheck", "--trials", "0"]) == 1


def test_unknown_subcommand(capsys):
    assert main(["mystery"]) == 1
