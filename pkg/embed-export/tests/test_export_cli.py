"""Exporter command line: subcommands, name-list files, exit codes."""

from embed_export.cli import main

from exporter_testlib import build_dataset, read_header


def _name_files(tmp_path, domains, classes):
    dfile = tmp_path / "domains.txt"
    cfile = tmp_path / "classes.txt"
    dfile.write_text("\n".join(domains) + "\n")
    cfile.write_text("# one per line\n" + "\n".join(classes) + "\n")
    return dfile, cfile


def test_export_then_verify_roundtrip(tmp_path, capsys):
    root = tmp_path / "data"
    build_dataset(root, ["d0", "d1"], ["c0", "c1", "c2"], images_per_cell=2, seed=4)
    dfile, cfile = _name_files(tmp_path, ["d0", "d1"], ["c0", "c1", "c2"])
    out = tmp_path / "out.fdcg"

    code = main(["export", "--root", str(root), "--out", str(out),
                 "--classes", str(cfile), "--domains", str(dfile),
                 "--encoder", "hashed-projection", "--dim", "8",
                 "--token-dim", "8"])
    assert code == 0
    assert "12 images" in capsys.readouterr().out
    assert read_header(out)["num_images"] == 12

    assert main(["verify", str(out)]) == 0
    assert "clean" in capsys.readouterr().out


def test_verify_corrupt_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.fdcg"
    bad.write_bytes(b"FDCGgarbage")
    assert main(["verify", str(bad)]) == 2
    assert "CORRUPT" in capsys.readouterr().out


def test_missing_flag_exits_1(capsys):
    assert main(["export", "--root", "/nowhere"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_default_encoder_offline_exits_2(tmp_path, capsys):
    root = tmp_path / "data"
    build_dataset(root, ["d0"], ["c0"], images_per_cell=1, seed=0)
    dfile, cfile = _name_files(tmp_path, ["d0"], ["c0"])
    code = main(["export", "--root", str(root), "--out", str(tmp_path / "o.fdcg"),
                 "--classes", str(cfile), "--domains", str(dfile)])
    assert code == 2
    assert "hashed-projection" in capsys.readouterr().err


def test_missing_cell_exits_2(tmp_path, capsys):
    root = tmp_path / "data"
    build_dataset(root, ["d0"], ["c0"], images_per_cell=1, seed=0)
    dfile, cfile = _name_files(tmp_path, ["d0"], ["c0", "ghost"])
    code = main(["export", "--root", str(root), "--out", str(tmp_path / "o.fdcg"),
                 "--classes", str(cfile), "--domains", str(dfile),
                 "--encoder", "hashed-projection", "--dim", "8"])
    assert code == 2
    assert "d0/ghost" in capsys.readouterr().err
