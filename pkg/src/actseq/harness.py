"""Train, evaluate and compare action-sequence systems on one dataset.

Systems:

* ``baseline``   collapse of the segmenter's frame-wise argmax
* ``boundary``   segmenter labels re-pooled between detected boundaries
* ``smoothing``  segmenter probabilities smoothed by a centered window
* ``seg2seq``    seq2seq model reading the segmenter's frame probabilities
* ``raw2seq``    seq2seq model reading the (normalized) features
* ``oracle`` / ``empty``  ground truth / empty prediction, for sanity checks

The three segmentation systems share one segmenter (trained with a boundary
head); the smoothing window and boundary threshold are picked on the
validation split by AER.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .core import ActionSequence, FeatureSequence, LabeledSample, LabelVocab, boundaries_of, collapse
from .datagen import PROFILES, GeneratorConfig, generate, normalize_per_sample
from .errors import ConfigError, ShapeError
from .io import Dataset, dump_json, read_dataset, write_predictions
from .metrics import (DurationBucketReport, MetricReport, aer, boundary_accuracy_by_duration,
                      buckets_from_edges, class_counts, confusion_matrix, evaluate, report_csv)
from .segmenter import (FrameProbs, Segmenter, SegmenterConfig, boundary_refine, predict_probs,
                        save_segmenter, smooth_refine, train_segmenter)
from .seq2seq import Seq2Seq, Seq2SeqConfig, infer_sequences, save_seq2seq, train_seq2seq
from .training import TrainConfig

log = logging.getLogger(__name__)

SEGMENTATION_SYSTEMS = ("baseline", "boundary", "smoothing")
SEQ2SEQ_SYSTEMS = ("seg2seq", "raw2seq")
TRIVIAL_SYSTEMS = ("oracle", "empty")
ALL_SYSTEMS = SEGMENTATION_SYSTEMS + SEQ2SEQ_SYSTEMS + TRIVIAL_SYSTEMS
PLAN_VERSION = "1.0"


@dataclass
class ExperimentPlan:
    generator: dict | None = None        # {"profile": name, "seed": s, ...overrides} or full config
    n_samples: int = 60
    dataset: str | None = None           # dataset directory (instead of a generator)
    split: dict = field(default_factory=lambda: {"train": 0.6, "val": 0.2, "test": 0.2})
    systems: list[str] = field(default_factory=lambda: list(SEGMENTATION_SYSTEMS + SEQ2SEQ_SYSTEMS))
    segmenter: dict = field(default_factory=lambda: {"boundary_head": True})
    segmenter_train: dict = field(default_factory=dict)
    seg2seq: dict = field(default_factory=dict)
    raw2seq: dict = field(default_factory=dict)
    seq2seq_train: dict = field(default_factory=lambda: {"batch_size": 32})
    smoothing_windows: list[int] = field(default_factory=lambda: [1, 5, 9, 15, 25, 35])
    boundary_thresholds: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.7])
    boundary_radius: int = 5
    duration_edges: list[float] | None = None
    normalize: bool = True
    folds: int = 0                        # > 1: k-fold training on train+val, ensembled
    replicates: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if (self.generator is None) == (self.dataset is None):
            raise ConfigError("plan needs exactly one of 'generator' or 'dataset'")
        unknown = set(self.systems) - set(ALL_SYSTEMS)
        if unknown:
            raise ConfigError(f"unknown systems {sorted(unknown)}; known: {list(ALL_SYSTEMS)}")
        if not self.systems:
            raise ConfigError("plan runs no systems")
        if set(self.split) != {"train", "val", "test"}:
            raise ConfigError("split needs train, val and test entries")
        values = list(self.split.values())
        if all(isinstance(v, (int, float)) for v in values):
            if any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-9:
                raise ConfigError("split fractions must be non-negative and sum to 1")
        elif all(isinstance(v, list) for v in values):
            flat = [i for v in values for i in v]
            if len(flat) != len(set(flat)):
                raise ConfigError("explicit splits must be disjoint")
        else:
            raise ConfigError("split must be all fractions or all id lists")
        if self.folds == 1 or self.folds < 0:
            raise ConfigError("folds must be 0 (off) or >= 2")
        if any(w < 1 or w % 2 == 0 for w in self.smoothing_windows):
            raise ConfigError("smoothing windows must be odd and >= 1")
        if self.n_samples < 1 or self.replicates < 0:
            raise ConfigError("n_samples must be >= 1 and replicates >= 0")

    def to_dict(self) -> dict:
        return {"format_version": PLAN_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        if "format_version" in d:
            nx.check_version(d.pop("format_version"), PLAN_VERSION, "plan")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ResultsBundle:
    reports: dict[str, MetricReport]
    predictions: dict[str, list[ActionSequence]]
    counts: list[dict]
    boundary: dict[str, DurationBucketReport]
    confusion: dict[str, np.ndarray]
    selected: dict
    logs: dict
    test_ids: list[str]
    run_dir: Path | None = None


# ---------------------------------------------------------------- data

def generator_config(spec: dict) -> GeneratorConfig:
    spec = dict(spec)
    profile = spec.pop("profile", None)
    if profile is None:
        return GeneratorConfig.from_dict(spec)
    if profile not in PROFILES:
        raise ConfigError(f"unknown generator profile {profile!r}; known: {sorted(PROFILES)}")
    return PROFILES[profile](**spec)


def load_plan_data(plan: ExperimentPlan) -> Dataset:
    if plan.dataset is not None:
        return read_dataset(plan.dataset)
    spec = dict(plan.generator)
    if "profile" in spec:
        spec.setdefault("seed", plan.seed)  # profiles follow the plan seed unless pinned
    cfg = generator_config(spec)
    samples = generate(cfg, plan.n_samples)
    return Dataset(LabelVocab(tuple(cfg.names)), cfg.frame_rate, samples)


def group_of(sample: LabeledSample) -> str:
    meta = sample.features.metadata
    return str(meta.get("group", meta.get("subject", sample.sample_id)))


def split_by_group(samples: Sequence[LabeledSample], fractions: dict, seed: int) -> dict[str, list[str]]:
    """Assign whole groups to train/val/test in a seeded random order."""
    groups = sorted({group_of(s) for s in samples})
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(len(groups))
    shuffled = [groups[i] for i in order]
    n = len(shuffled)
    n_train = int(round(fractions["train"] * n))
    n_val = int(round(fractions["val"] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    parts = {"train": set(shuffled[:n_train]), "val": set(shuffled[n_train:n_train + n_val]),
             "test": set(shuffled[n_train + n_val:])}
    return {k: [s.sample_id for s in samples if group_of(s) in g] for k, g in parts.items()}


def resolve_splits(plan: ExperimentPlan, data: Dataset) -> dict[str, list[str]]:
    if all(isinstance(v, list) for v in plan.split.values()):
        known = {s.sample_id for s in data.samples}
        missing = [i for v in plan.split.values() for i in v if i not in known]
        if missing:
            raise ConfigError(f"split lists unknown samples: {missing[:5]}")
        return {k: list(v) for k, v in plan.split.items()}
    splits = split_by_group(data.samples, plan.split, plan.seed)
    if not splits["train"] or not splits["test"]:
        raise ConfigError("split leaves the train or test set empty")
    return splits


# ------------------------------------------------------------- counting

def count_report(gts: Sequence[Sequence[int]], preds: Sequence[Sequence[int]],
                 groups: Sequence[str], class_names: Sequence[str]) -> list[dict]:
    """Per-group ground-truth vs predicted class counts, then mean and std rows.

    Relative error is ``(predicted - truth) / truth`` and blank where the truth
    is zero. Mean and (population) std rows are taken over groups.
    """
    if not len(gts) == len(preds) == len(groups):
        raise ShapeError("count report needs equally many truths, predictions and groups")
    c = len(class_names)
    order = sorted(set(groups))
    totals = {g: [np.zeros(c, dtype=np.int64), np.zeros(c, dtype=np.int64)] for g in order}
    for G, P, g in zip(gts, preds, groups):
        totals[g][0] += class_counts(G, c)
        totals[g][1] += class_counts(P, c)

    def row(label, gt, pr):
        r = {"group": label}
        for k, name in enumerate(class_names):
            r[f"{name}_gt"] = gt[k]
            r[f"{name}_pred"] = pr[k]
            r[f"{name}_rel_error"] = (pr[k] - gt[k]) / gt[k] if gt[k] else ""
        return r

    rows = [row(g, totals[g][0].tolist(), totals[g][1].tolist()) for g in order]
    if order:
        gt_all = np.array([totals[g][0] for g in order], dtype=np.float64)
        pr_all = np.array([totals[g][1] for g in order], dtype=np.float64)
        rows.append(row("mean", gt_all.mean(axis=0).tolist(), pr_all.mean(axis=0).tolist()))
        std = {"group": "std"}
        for k, name in enumerate(class_names):
            std[f"{name}_gt"] = float(gt_all[:, k].std())
            std[f"{name}_pred"] = float(pr_all[:, k].std())
            std[f"{name}_rel_error"] = ""
        rows.append(std)
    return rows


# ------------------------------------------------------------ selection

def _mean_aer(gts, preds) -> float:
    vals = [aer(G, P) for G, P in zip(gts, preds) if len(G)]
    return float(np.mean(vals)) if vals else 0.0


def _pick(candidates, score) -> tuple:
    """Lowest score; ties keep the earlier candidate."""
    best, best_score = None, float("inf")
    for c in candidates:
        s = score(c)
        if s < best_score:
            best, best_score = c, s
    return best, best_score


def _average_probs(prob_sets: Sequence[Sequence[FrameProbs]]) -> list[FrameProbs]:
    out = []
    for members in zip(*prob_sets):
        probs = np.mean([m.probs for m in members], axis=0)
        bnd = None
        if all(m.boundary is not None for m in members):
            bnd = np.mean([m.boundary for m in members], axis=0)
        out.append(FrameProbs(probs, bnd))
    return out


# ----------------------------------------------------------------- run

def _features(samples, normalize: bool) -> list[FeatureSequence]:
    return [normalize_per_sample(s.features) if normalize else s.features for s in samples]


def _fold_partition(ids: Sequence[str], groups: Sequence[str], k: int, seed: int) -> list[list[str]]:
    uniq = sorted(set(groups))
    if len(uniq) < k:
        raise ConfigError(f"{k} folds need at least {k} groups, have {len(uniq)}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D])).permutation(len(uniq))
    fold_of = {uniq[j]: n % k for n, j in enumerate(order)}
    return [[i for i, g in zip(ids, groups) if fold_of[g] == f] for f in range(k)]


def run_plan(plan: ExperimentPlan, run_dir=None) -> ResultsBundle:
    """Run every system of ``plan``; write artifacts to ``run_dir`` when given."""
    plan.validate()
    t0 = time.time()
    data = load_plan_data(plan)
    names = list(data.vocab.classes)
    c = len(names)
    splits = resolve_splits(plan, data)
    index = data.by_id()
    train = [index[i] for i in splits["train"]]
    val = [index[i] for i in splits["val"]]
    test = [index[i] for i in splits["test"]]
    feats = {s.sample_id: f for s, f in zip(data.samples, _features(data.samples, plan.normalize))}
    D = data.feature_dim
    systems = list(plan.systems)
    need_seg = any(s in systems for s in SEGMENTATION_SYSTEMS + ("seg2seq",))
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)
        resolved = plan.to_dict()
        resolved["resolved_splits"] = splits
        resolved["classes"] = names
        dump_json(run_dir / "plan.json", resolved)

    # training folds: one (train, val) pair, or k pairs over train+val
    if plan.folds > 1:
        pool = train + val
        parts = _fold_partition([s.sample_id for s in pool], [group_of(s) for s in pool],
                                plan.folds, plan.seed)
        folds = [([index[i] for p in parts[:f] + parts[f + 1:] for i in p],
                  [index[i] for i in parts[f]]) for f in range(plan.folds)]
    else:
        folds = [(train, val)]

    def pairs(samples, inputs):
        return [(inputs[s.sample_id], s.frame_labels) for s in samples]

    logs: dict = {}
    selected: dict = {}
    seg_models: list[Segmenter] = []
    seg_cfg = SegmenterConfig(**{"input_dim": D, "num_classes": c, **plan.segmenter})
    seg_tc = TrainConfig(**plan.segmenter_train)
    if need_seg:
        for f, (tr, va) in enumerate(folds):
            model, lg = train_segmenter(pairs(tr, feats), pairs(va, feats) or None, seg_cfg, seg_tc,
                                        seed=nx.derive_seed(plan.seed, 10, f))
            seg_models.append(model)
            tag = "segmenter" if len(folds) == 1 else f"segmenter_fold{f}"
            logs[tag] = lg.to_dict()
            if run_dir is not None:
                save_segmenter(run_dir / "checkpoints" / f"{tag}.json", model)
        log.info("segmenter(s) trained (%.1fs)", time.time() - t0)

    # per-model segmenter probabilities for every sample
    seg_probs: list[dict[str, FrameProbs]] = []
    for model in seg_models:
        ids = [s.sample_id for s in data.samples]
        seg_probs.append(dict(zip(ids, predict_probs(model, [feats[i] for i in ids]))))

    def ens_probs(samples) -> list[FrameProbs]:
        return _average_probs([[p[s.sample_id] for s in samples] for p in seg_probs])

    predictions: dict[str, list[ActionSequence]] = {}
    frame_preds: dict[str, list[np.ndarray]] = {}
    gts = [s.sequence for s in test]
    sel_val = val if val else train

    if need_seg:
        vp, tp = ens_probs(sel_val), ens_probs(test)
        vg = [s.sequence for s in sel_val]
        if "baseline" in systems:
            frame_preds["baseline"] = [p.argmax() for p in tp]
        if "smoothing" in systems:
            w, score = _pick(plan.smoothing_windows,
                             lambda w: _mean_aer(vg, [collapse(smooth_refine(p, w)) for p in vp]))
            selected["smoothing_window"] = w
            selected["smoothing_val_aer"] = score
            frame_preds["smoothing"] = [smooth_refine(p, w).labels for p in tp]
        if "boundary" in systems:
            if not seg_cfg.boundary_head:
                raise ConfigError("the boundary system needs segmenter.boundary_head = true")
            r = plan.boundary_radius
            th, score = _pick(plan.boundary_thresholds, lambda th: _mean_aer(
                vg, [collapse(boundary_refine(p, th, r)) for p in vp]))
            selected["boundary_threshold"] = th
            selected["boundary_val_aer"] = score
            frame_preds["boundary"] = [boundary_refine(p, th, r).labels for p in tp]
        for name, fp in frame_preds.items():
            predictions[name] = [collapse(f) for f in fp]

    for kind in SEQ2SEQ_SYSTEMS:
        if kind not in systems:
            continue
        overrides = getattr(plan, kind)
        input_kind = "probs" if kind == "seg2seq" else "raw"
        cfg = Seq2SeqConfig(**{"input_dim": c if kind == "seg2seq" else D, "num_classes": c,
                               "input_kind": input_kind, **overrides})
        tc = TrainConfig(**plan.seq2seq_train)
        models: list[Seq2Seq] = []
        for f, (tr, va) in enumerate(folds):
            if kind == "seg2seq":
                inputs = {i: p.probs for i, p in seg_probs[f].items()}
            else:
                inputs = feats
            model, lg = train_seq2seq(pairs(tr, inputs), pairs(va, inputs) or None, cfg, tc,
                                      seed=nx.derive_seed(plan.seed, 20 + len(models), f,
                                                          SEQ2SEQ_SYSTEMS.index(kind)))
            models.append(model)
            tag = kind if len(folds) == 1 else f"{kind}_fold{f}"
            logs[tag] = lg.to_dict()
            if run_dir is not None:
                save_seq2seq(run_dir / "checkpoints" / f"{tag}.json", model)
        if kind == "seg2seq":
            test_inputs = [[seg_probs[f][s.sample_id].probs for f in range(len(models))]
                           for s in test]
        else:
            test_inputs = [[feats[s.sample_id]] * len(models) for s in test]
        if len(models) == 1:
            test_inputs = [x[0] for x in test_inputs]
        predictions[kind] = infer_sequences(test_inputs, models if len(models) > 1 else models[0])
        log.info("%s trained and decoded (%.1fs)", kind, time.time() - t0)

    if "oracle" in systems:
        predictions["oracle"] = [ActionSequence(s.sequence) for s in test]
    if "empty" in systems:
        predictions["empty"] = [ActionSequence() for _ in test]

    ordered = [s for s in ALL_SYSTEMS if s in predictions]
    reports: dict[str, MetricReport] = {}
    confusion: dict[str, np.ndarray] = {}
    boundary: dict[str, DurationBucketReport] = {}
    counts: list[dict] = []
    edges = plan.duration_edges
    buckets = buckets_from_edges(edges) if edges else None
    groups = [group_of(s) for s in test]
    for name in ordered:
        preds = predictions[name]
        fpairs = None
        if name in frame_preds:
            fpairs = [(s.frame_labels, f) for s, f in zip(test, frame_preds[name])]
        elif name == "oracle":
            fpairs = [(s.frame_labels, s.frame_labels) for s in test]
        reports[name] = evaluate(gts, preds, names, fpairs, plan.replicates,
                                 seed=nx.derive_seed(plan.seed, 30))
        confusion[name] = confusion_matrix(gts, preds, c)
        counts.extend({"system": name, **r} for r in count_report(gts, preds, groups, names))
        if name in frame_preds:
            rep = None
            for s, f in zip(test, frame_preds[name]):
                r = boundary_accuracy_by_duration(s.frame_labels, boundaries_of(f), buckets)
                rep = r if rep is None else rep.merge(r)
            boundary[name] = rep

    bundle = ResultsBundle(reports, predictions, counts, boundary, confusion, selected, logs,
                           [s.sample_id for s in test], run_dir)
    if run_dir is not None:
        write_bundle(bundle, names, run_dir)
    log.info("plan finished (%.1fs)", time.time() - t0)
    return bundle


def write_bundle(bundle: ResultsBundle, class_names: Sequence[str], run_dir) -> None:
    run_dir = Path(run_dir)
    dump_json(run_dir / "metrics.json", {
        "format_version": PLAN_VERSION,
        "systems": {k: r.to_dict() for k, r in bundle.reports.items()},
        "selected": bundle.selected,
        "test_ids": bundle.test_ids,
    })
    (run_dir / "metrics.csv").write_text(
        report_csv([{"system": k, **r.csv_row()} for k, r in bundle.reports.items()]))
    (run_dir / "counts.csv").write_text(report_csv(bundle.counts))
    rows = [{"system": k, **row} for k, rep in bundle.boundary.items() for row in rep.to_rows()]
    (run_dir / "boundary_report.csv").write_text(
        report_csv(rows) if rows else "system,duration_low_s,duration_high_s,accuracy,detected,count\n")
    conf_rows = []
    for k, m in bundle.confusion.items():
        for g, name in enumerate(class_names):
            conf_rows.append({"system": k, "ground_truth": name,
                              **{p: float(m[g, j]) for j, p in enumerate(class_names)}})
    (run_dir / "confusion.csv").write_text(report_csv(conf_rows))
    for k, lg in bundle.logs.items():
        dump_json(run_dir / "logs" / f"{k}.json", lg)
    for k, preds in bundle.predictions.items():
        write_predictions(run_dir / "predictions" / f"{k}.jsonl",
                          [(i, [class_names[t] for t in p]) for i, p in zip(bundle.test_ids, preds)])
