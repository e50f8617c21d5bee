import json

import numpy as np
import pytest

from actseq.core import FeatureSequence, FrameLabeling, LabeledSample
from actseq.errors import ConfigError, ShapeError
from actseq.harness import ExperimentPlan, count_report, run_plan, split_by_group

NAMES = ("reach", "idle")

TINY_SEG = {"boundary_head": True, "channels": 8, "layers_per_stage": 2, "stages": 1}
TINY_S2S = {"window": {"length": 24, "stride": 12, "margin": 4}, "encoder_hidden": 8,
            "encoder_layers": 2, "decoder_hidden": 16, "max_decode_len": 8}


def tiny_plan(**kw):
    base = dict(generator={"profile": "stroke-like", "seed": 2, "length_range": [80, 120]},
                n_samples=10, segmenter=dict(TINY_SEG),
                segmenter_train={"epochs": 2}, seg2seq=dict(TINY_S2S), raw2seq=dict(TINY_S2S),
                seq2seq_train={"epochs": 2, "batch_size": 16},
                systems=["baseline", "boundary", "smoothing", "seg2seq", "raw2seq", "oracle",
                         "empty"],
                smoothing_windows=[1, 5], boundary_thresholds=[0.5], replicates=20, seed=4)
    base.update(kw)
    return ExperimentPlan(**base)


def test_count_report_identical_predictions():
    gts = [(0, 1, 0), (1,), (0, 1)]
    rows = count_report(gts, gts, ["a", "a", "b"], NAMES)
    assert [r["group"] for r in rows] == ["a", "b", "mean", "std"]
    for r in rows[:2]:
        assert r["reach_rel_error"] == 0 and r["idle_rel_error"] == 0
    assert rows[0]["reach_gt"] == 2 and rows[0]["idle_gt"] == 2
    assert rows[2]["reach_gt"] == 1.5
    assert rows[3]["reach_gt"] == pytest.approx(0.5)


def test_count_report_one_extra_reach():
    gts = [(0, 1), (0, 1)]
    preds = [(0, 1, 0), (0, 1)]
    rows = count_report(gts, preds, ["p1", "p2"], NAMES)
    assert rows[0]["reach_pred"] - rows[0]["reach_gt"] == 1
    assert rows[0]["reach_rel_error"] == 1.0
    assert rows[1]["reach_rel_error"] == 0.0
    assert rows[0]["idle_rel_error"] == 0.0


def test_count_report_zero_truth_blank_and_length_check():
    rows = count_report([(0,)], [(0, 1)], ["g"], NAMES)
    assert rows[0]["idle_rel_error"] == ""
    with pytest.raises(ShapeError):
        count_report([(0,)], [], ["g"], NAMES)


def grouped_samples():
    out = []
    for k in range(12):
        x = FeatureSequence(np.zeros((3, 1)), 1.0, {"group": f"g{k // 2}"})
        out.append(LabeledSample(x, FrameLabeling([0, 0, 1]), sample_id=f"s{k}"))
    return out


def test_split_by_group_disjoint_and_group_pure():
    samples = grouped_samples()
    splits = split_by_group(samples, {"train": 0.6, "val": 0.2, "test": 0.2}, seed=3)
    ids = [i for v in splits.values() for i in v]
    assert sorted(ids) == sorted(s.sample_id for s in samples)
    assert len(ids) == len(set(ids))
    group = {s.sample_id: s.features.metadata["group"] for s in samples}
    seen = [{group[i] for i in v} for v in splits.values()]
    assert not (seen[0] & seen[1]) and not (seen[0] & seen[2]) and not (seen[1] & seen[2])
    assert all(splits.values())
    assert splits == split_by_group(samples, {"train": 0.6, "val": 0.2, "test": 0.2}, seed=3)


def test_plan_validation():
    with pytest.raises(ConfigError):
        ExperimentPlan()
    with pytest.raises(ConfigError):
        tiny_plan(systems=["nope"])
    with pytest.raises(ConfigError):
        tiny_plan(split={"train": 0.5, "val": 0.1, "test": 0.1})
    with pytest.raises(ConfigError):
        tiny_plan(split={"train": ["a"], "val": ["a"], "test": []})
    with pytest.raises(ConfigError):
        tiny_plan(folds=1)
    with pytest.raises(ConfigError):
        tiny_plan(smoothing_windows=[4])
    with pytest.raises(ConfigError):
        ExperimentPlan.from_dict({**tiny_plan().to_dict(), "extra_field": 1})
    assert ExperimentPlan.from_dict(tiny_plan().to_dict()) == tiny_plan()


def test_trivial_systems_only():
    b = run_plan(tiny_plan(systems=["oracle", "empty"]))
    assert b.reports["oracle"].values["edit_score"] == 100.0
    assert b.reports["oracle"].values["aer"] == 0.0
    assert b.reports["oracle"].values["f1"] == 1.0
    assert b.reports["empty"].values["aer"] == 1.0
    assert b.reports["empty"].values["tpr"] == 0.0


def test_full_tiny_plan_writes_run_directory(tmp_path):
    plan = tiny_plan()
    b = run_plan(plan, tmp_path / "run")
    run = tmp_path / "run"
    for name in ("plan.json", "metrics.json", "metrics.csv", "counts.csv", "boundary_report.csv",
                 "confusion.csv"):
        assert (run / name).is_file(), name
    resolved = json.loads((run / "plan.json").read_text())
    assert resolved["seed"] == plan.seed and "resolved_splits" in resolved
    split_ids = [i for v in resolved["resolved_splits"].values() for i in v]
    assert len(split_ids) == len(set(split_ids)) == plan.n_samples
    assert set(b.test_ids) == set(resolved["resolved_splits"]["test"])
    for name in ("segmenter", "seg2seq", "raw2seq"):
        assert (run / "checkpoints" / f"{name}.json").is_file()
        assert (run / "logs" / f"{name}.json").is_file()
    assert set(b.reports) == set(plan.systems)
    for name in plan.systems:
        assert (run / "predictions" / f"{name}.jsonl").is_file()
    assert set(b.boundary) == {"baseline", "boundary", "smoothing"}
    assert b.selected["smoothing_window"] in (1, 5)
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["systems"]["oracle"]["metrics"]["aer"]["value"] == 0.0


def test_rerun_is_bit_identical(tmp_path):
    plan = tiny_plan(systems=["baseline", "raw2seq"])
    run_plan(plan, tmp_path / "a")
    run_plan(plan, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_kfold_ensemble_runs():
    b = run_plan(tiny_plan(folds=2, systems=["baseline", "seg2seq", "oracle"]))
    assert {"segmenter_fold0", "segmenter_fold1", "seg2seq_fold0", "seg2seq_fold1"} <= set(b.logs)
    assert len(b.predictions["seg2seq"]) == len(b.test_ids)
    assert b.reports["oracle"].values["aer"] == 0.0


def test_boundary_system_needs_boundary_head():
    with pytest.raises(ConfigError):
        run_plan(tiny_plan(segmenter={**TINY_SEG, "boundary_head": False}, systems=["boundary"]))
