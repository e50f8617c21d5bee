import json
import subprocess
import sys

import pytest

from actseq.cli import _resolve, main
from actseq.io import read_dataset, read_predictions, write_predictions


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def small_data(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"generator": {"profile": "stroke-like",
                                             "length_range": [80, 120]}}))
    code, _, _ = run(["synth", "--n", 10, "--seed", 7, "--config", cfg,
                      "--out", tmp_path / "data"], capsys)
    assert code == 0
    return tmp_path / "data"


def test_collapse_prints_names(tmp_path, capsys):
    f = tmp_path / "labels.csv"
    f.write_text("a\na\nb\n")
    code, out, _ = run(["collapse", f], capsys)
    assert code == 0 and json.loads(out) == ["a", "b"]
    f.write_text("0\n0\n1\n1\n0\n")
    _, out, _ = run(["collapse", f, "--classes", "reach,idle"], capsys)
    assert json.loads(out) == ["reach", "idle", "reach"]


def test_synth_twice_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        code, _, _ = run(["synth", "--profile", "stroke-like", "--n", 60, "--seed", 7,
                          "--out", tmp_path / d], capsys)
        assert code == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(a) == 1 + 2 * 60
    assert a == b


def test_eval_with_ground_truth_scores_100(small_data, tmp_path, capsys):
    ds = read_dataset(small_data)
    preds = tmp_path / "gt.jsonl"
    write_predictions(preds, [(s.sample_id, ds.vocab.decode(s.sequence)) for s in ds.samples])
    code, out, _ = run(["eval", "--predictions", preds, "--data", small_data,
                        "--out", tmp_path / "ev", "--replicates", 50], capsys)
    assert code == 0 and "edit_score=100.0000" in out
    doc = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert doc["metrics"]["edit_score"]["value"] == 100.0
    assert doc["config"]["replicates"] == 50
    assert (tmp_path / "ev" / "metrics.csv").is_file()
    code, _, _ = run(["count", "--predictions", preds, "--data", small_data,
                      "--out", tmp_path / "counts.csv"], capsys)
    assert code == 0
    header, *rows = (tmp_path / "counts.csv").read_text().splitlines()
    assert "reach_rel_error" in header and rows[-1].startswith("std")


def test_train_infer_boundary_report(small_data, tmp_path, capsys):
    seg_cfg = tmp_path / "seg.json"
    seg_cfg.write_text(json.dumps({"model": {"channels": 8, "layers_per_stage": 2, "stages": 1},
                                   "train": {"epochs": 5}}))
    code, _, err = run(["train", "--system", "segmenter", "--data", small_data, "--epochs", 2,
                        "--config", seg_cfg, "--out", tmp_path / "seg.ckpt.json"], capsys)
    assert code == 0, err
    ckpt = json.loads((tmp_path / "seg.ckpt.json").read_text())
    # flag beats config file
    assert ckpt["training"]["epochs"] == 2 and len(ckpt["log"]["entries"]) == 2
    code, _, err = run(["infer", "--checkpoint", tmp_path / "seg.ckpt.json", "--data", small_data,
                        "--refine", "smooth", "--window", 5, "--out", tmp_path / "p.jsonl"], capsys)
    assert code == 0, err
    ids = [i for i, _ in read_predictions(tmp_path / "p.jsonl")]
    assert ids == read_dataset(small_data).splits["test"]
    code, out, err = run(["boundary-report", "--checkpoint", tmp_path / "seg.ckpt.json",
                          "--data", small_data, "--edges", "0,0.5,2,100",
                          "--out", tmp_path / "b.csv"], capsys)
    assert code == 0, err
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 4

    s2s_cfg = tmp_path / "s2s.json"
    s2s_cfg.write_text(json.dumps({"model": {"window": {"length": 24, "stride": 12, "margin": 4},
                                             "encoder_hidden": 8, "encoder_layers": 2,
                                             "decoder_hidden": 16, "max_decode_len": 8}}))
    code, _, err = run(["train", "--system", "seg2seq", "--data", small_data, "--epochs", 1,
                        "--segmenter", tmp_path / "seg.ckpt.json", "--config", s2s_cfg,
                        "--out", tmp_path / "s2s.ckpt.json"], capsys)
    assert code == 0, err
    code, _, err = run(["infer", "--checkpoint", tmp_path / "s2s.ckpt.json", "--data", small_data,
                        "--out", tmp_path / "q.jsonl"], capsys)
    assert code == 0, err
    assert len(read_predictions(tmp_path / "q.jsonl")) == len(ids)


def test_error_line_format(tmp_path, capsys):
    code, _, err = run(["eval", "--predictions", tmp_path / "none.jsonl",
                        "--data", tmp_path / "none", "--out", tmp_path / "o"], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: format: ")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"generator": {"profile": "no-such-profile"}}))
    code, _, err = run(["synth", "--config", bad, "--out", tmp_path / "x"], capsys)
    assert code == 1 and err.startswith("error: config: ")


def test_shape_error_category(small_data, tmp_path, capsys):
    sid = read_dataset(small_data).samples[0].sample_id
    (small_data / f"{sid}.labels.csv").write_text("0\n")
    code, _, err = run(["count", "--predictions", tmp_path / "p.jsonl", "--data", small_data,
                        "--out", tmp_path / "c.csv"], capsys)
    assert code == 1 and err.startswith("error: shape: ")


def test_resolve_precedence():
    assert _resolve({"a": 1, "b": 1, "c": 1}, {"b": 2, "c": 2}, {"c": 3, "b": None}) == \
        {"a": 1, "b": 2, "c": 3}


def test_output_dir_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ACTSEQ_OUTPUT_DIR", str(tmp_path / "outs"))
    code, _, _ = run(["synth", "--n", 3, "--out", "rel"], capsys)
    assert code == 0 and (tmp_path / "outs" / "rel" / "meta.json").is_file()


def test_module_entry_point(tmp_path):
    f = tmp_path / "l.csv"
    f.write_text("x\ny\ny\n")
    res = subprocess.run([sys.executable, "-m", "actseq", "collapse", str(f)],
                         capture_output=True, text=True, check=True)
    assert json.loads(res.stdout) == ["x", "y"]
