import numpy as np
from conftest import make_images, make_two_class_images, write_manifest

from octfeat.cli import cli
from octfeat.featio import read_feat


def test_extract_densenet_random_init(tmp_path, capsys):
    rows = make_images(tmp_path, 3, seed=1)
    write_manifest(tmp_path / "m.tsv", rows)
    out = tmp_path / "f.feat"
    rc = cli([
        "extract",
        "--manifest", str(tmp_path / "m.tsv"),
        "--out", str(out),
        "--weights", "none",
        "--input-size", "64",
        "--batch-size", "2",
    ])
    assert rc == 0
    assert "wrote 3 rows of dim 1920" in capsys.readouterr().out
    ids, values = read_feat(str(out))
    assert ids == [r[0] for r in rows]
    assert values.shape == (3, 1920)
    assert np.isfinite(values).all()


def test_extract_reports_exclusions(tmp_path, capsys):
    rows = make_images(tmp_path, 2, seed=1)
    rows.append(("ghost", "normal_a", str(tmp_path / "nope.png")))
    write_manifest(tmp_path / "m.tsv", rows)
    rc = cli([
        "extract",
        "--manifest", str(tmp_path / "m.tsv"),
        "--out", str(tmp_path / "f.feat"),
        "--weights", "none",
        "--input-size", "64",
    ])
    assert rc == 0
    captured = capsys.readouterr()
    assert "excluded ghost" in captured.err
    assert "wrote 2 rows" in captured.out


def test_finetune_flag_needs_manifests(tmp_path, capsys):
    rows = make_images(tmp_path, 2)
    write_manifest(tmp_path / "m.tsv", rows)
    rc = cli([
        "extract",
        "--manifest", str(tmp_path / "m.tsv"),
        "--out", str(tmp_path / "f.feat"),
        "--weights", "none",
        "--finetune",
    ])
    assert rc == 1
    assert "train-manifest" in capsys.readouterr().err


def test_missing_manifest_errors(tmp_path, capsys):
    rc = cli([
        "extract",
        "--manifest", str(tmp_path / "absent.tsv"),
        "--out", str(tmp_path / "f.feat"),
        "--weights", "none",
    ])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_finetune_then_extract_densenet(tmp_path, capsys):
    # end to end on the real backbone at small input; random init weights
    rows = make_two_class_images(tmp_path, 4, seed=6, side=64)
    write_manifest(tmp_path / "train.tsv", rows[:6])
    write_manifest(tmp_path / "val.tsv", rows[6:])
    write_manifest(tmp_path / "m.tsv", rows)
    rc = cli([
        "extract",
        "--manifest", str(tmp_path / "m.tsv"),
        "--out", str(tmp_path / "f.feat"),
        "--weights", "none",
        "--input-size", "64",
        "--batch-size", "4",
        "--finetune",
        "--train-manifest", str(tmp_path / "train.tsv"),
        "--val-manifest", str(tmp_path / "val.tsv"),
        "--epochs", "1",
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "best epoch 1" in out
    assert "wrote 8 rows of dim 1920" in out
