"""Command-line behavior: exit codes, messages and written artifacts."""

from __future__ import annotations

import json

import numpy as np
import pytest

from instmap.cli import main
from instmap.fusion import LikelihoodMatrix


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "seq"
    args = ["synth", "--output", str(root), "--objects", "2", "--classes", "chair,table", "--frames", "20"]
    args += ["--stride", "5", "--width", "120", "--height", "90", "--voxel-length", "0.04"]
    assert main(args) == 0
    return root


def test_synth_layout(seq_dir):
    assert (seq_dir / "intrinsic.txt").exists()
    assert len(list((seq_dir / "depth").glob("*.png"))) == 20
    assert len(list((seq_dir / "prediction").glob("*.json"))) == 4
    assert (seq_dir / "gt.txt").exists()


def test_fuse_then_evaluate(seq_dir, tmp_path, capsys):
    out = tmp_path / "map"
    rc = main(["fuse", "--input", str(seq_dir), "--output", str(out), "--voxel-length", "0.04", "--stride", "5"])
    assert rc == 0
    assert "2 instances" in capsys.readouterr().out
    for name in ("labeled_cloud.ply", "instances.json", "report.json", "events.jsonl"):
        assert (out / name).exists()
    rc = main(["evaluate", "--pred", str(out), "--gt", str(seq_dir), "--iou", "0.25", "0.5", "--cell", "0.04"])
    assert rc == 0
    text = capsys.readouterr().out
    assert text.splitlines()[-1].split() == ["mean", "100.0", "100.0"]


def test_geometry_only_has_no_instances(seq_dir, tmp_path):
    out = tmp_path / "geo"
    assert main(["fuse", "--input", str(seq_dir), "--output", str(out), "--voxel-length", "0.04", "--geometry-only"]) == 0
    assert json.loads((out / "instances.json").read_text())["instances"] == []


def test_missing_input_directory(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["fuse", "--input", str(missing), "--output", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert str(missing) in err and len(err.strip().splitlines()) == 1


def test_unknown_flag_exits_2(tmp_path, capsys):
    assert main(["fuse", "--input", "x", "--output", "y", "--bogus"]) == 2
    assert "unrecognized" in capsys.readouterr().err
    assert main(["fuse"]) == 2


def test_malformed_config(seq_dir, tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("voxel_length = [\n")
    assert main(["fuse", "--config", str(cfg), "--input", str(seq_dir), "--output", str(tmp_path / "o")]) == 1
    assert "malformed" in capsys.readouterr().err


def test_bad_override_value(seq_dir, tmp_path, capsys):
    rc = main(["fuse", "--input", str(seq_dir), "--output", str(tmp_path / "o"), "--stride", "zero"])
    assert rc == 1
    assert "stride" in capsys.readouterr().err


def test_summarize_likelihood(tmp_path, space):
    log = tmp_path / "log.jsonl"
    rows = [
        {"frame": 0, "prompt": ["couch"], "instances": [{"class": "sofa", "labels": ["couch"]}]},
        {"frame": 1, "prompt": [], "instances": [{"class": "sofa", "labels": []}]},
        {"frame": 2, "prompt": ["couch"], "instances": None},
    ]
    log.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    out, ev = tmp_path / "m.csv", tmp_path / "ev.csv"
    assert main(["summarize-likelihood", "--log", str(log), "--output", str(out), "--evidence", str(ev)]) == 0
    m = LikelihoodMatrix.load_csv(out, space)
    assert m.values[space.open_index("couch"), space.closed_index("sofa")] == pytest.approx(0.5)
    assert np.count_nonzero(m.values) == 1
    assert ev.exists()


def test_summarize_rejects_unknown_label(tmp_path, capsys):
    log = tmp_path / "log.jsonl"
    log.write_text(json.dumps({"frame": 0, "prompt": ["galaxy"], "instances": []}) + "\n")
    assert main(["summarize-likelihood", "--log", str(log), "--output", str(tmp_path / "m.csv")]) == 1
    assert "galaxy" in capsys.readouterr().err
