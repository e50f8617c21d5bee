"""Command line: ``actseq <command> [options]``.

Settings resolve as command-line flag, then ``--config`` JSON file, then the
built-in default. Relative output paths are placed under ``$ACTSEQ_OUTPUT_DIR``
when that variable is set. Failures exit with status 1 and print one line
``error: <category>: <detail>`` to standard error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .core import LabelVocab, boundaries_of, collapse
from .datagen import generate, normalize_per_sample
from .errors import ActSeqError, ConfigError, FormatError
from .harness import ExperimentPlan, count_report, generator_config, run_plan, split_by_group
from .io import (FORMAT_VERSION, OUTPUT_DIR_ENV, Dataset, dump_json, load_json, read_dataset,
                 read_predictions, write_dataset, write_predictions)
from .metrics import boundary_accuracy_by_duration, buckets_from_edges, evaluate, report_csv
from .numerics import load_checkpoint
from .segmenter import (SegmenterConfig, boundary_refine, load_segmenter, predict_probs,
                        save_segmenter, smooth_refine, train_segmenter)
from .seq2seq import Seq2SeqConfig, infer_sequences, load_seq2seq, save_seq2seq, train_seq2seq
from .training import TrainConfig


def _out(path) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _config(args) -> dict:
    if not args.config:
        return {}
    doc = load_json(args.config)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def _resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """Flag beats config file beats default; ``None`` flags are unset."""
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _inputs(sample, normalize: bool):
    return normalize_per_sample(sample.features) if normalize else sample.features


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    cfg_file = _config(args)
    gen = dict(cfg_file.get("generator", {}))
    if args.profile is not None or "profile" not in gen and "transition" not in gen:
        gen["profile"] = args.profile or "stroke-like"
    if args.seed is not None or "seed" not in gen:
        gen["seed"] = args.seed if args.seed is not None else 0
    n = args.n if args.n is not None else cfg_file.get("n", 60)
    fractions = cfg_file.get("split", {"train": 0.6, "val": 0.2, "test": 0.2})
    gcfg = generator_config(gen)
    samples = generate(gcfg, n)
    splits = split_by_group(samples, fractions, gcfg.seed)
    ds = Dataset(LabelVocab(tuple(gcfg.names)), gcfg.frame_rate, samples, splits,
                 {"generator": gcfg.to_dict(), "n": n, "split_fractions": fractions})
    out = _out(args.out)
    write_dataset(out, ds)
    print(f"wrote {n} samples ({', '.join(f'{k}={len(v)}' for k, v in splits.items())}) to {out}")


def cmd_train(args) -> None:
    cfg_file = _config(args)
    ds = read_dataset(args.data)
    c, D = ds.vocab.num_classes, ds.feature_dim
    seed = args.seed if args.seed is not None else cfg_file.get("seed", 0)
    flags = {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size}
    train_defaults = TrainConfig(batch_size=8 if args.system == "segmenter" else 32).to_dict()
    tc = TrainConfig.from_dict(_resolve(train_defaults, cfg_file.get("train", {}), flags))
    model_cfg = dict(cfg_file.get("model", {}))
    normalize = cfg_file.get("normalize", True)
    train, val = ds.split("train"), ds.splits.get("val") and ds.split("val")
    if args.system == "segmenter":
        cfg = SegmenterConfig(**{"input_dim": D, "num_classes": c, "boundary_head": True, **model_cfg})
        to_pairs = lambda ss: [(_inputs(s, normalize), s.frame_labels) for s in ss]
        model, lg = train_segmenter(to_pairs(train), to_pairs(val) if val else None, cfg, tc, seed)
        extra = {"training": tc.to_dict(), "seed": seed, "normalize": normalize,
                 "classes": list(ds.vocab.classes), "log": lg.to_dict()}
        save_segmenter(_out(args.out), model, extra)
    else:
        if args.system == "seg2seq":
            if not args.segmenter:
                raise ConfigError("seg2seq training needs --segmenter CHECKPOINT")
            seg_doc = load_checkpoint(args.segmenter)
            seg = load_segmenter(seg_doc)
            seg_norm = seg_doc.get("normalize", True)
            to_input = lambda ss: [p.probs for p in
                                   predict_probs(seg, [_inputs(s, seg_norm) for s in ss])]
            dim = c
        else:
            to_input = lambda ss: [_inputs(s, normalize) for s in ss]
            dim = D
        cfg = Seq2SeqConfig(**{"input_dim": dim, "num_classes": c,
                               "input_kind": "probs" if args.system == "seg2seq" else "raw",
                               **model_cfg})
        to_pairs = lambda ss: list(zip(to_input(ss), [s.frame_labels for s in ss]))
        model, lg = train_seq2seq(to_pairs(train), to_pairs(val) if val else None, cfg, tc, seed)
        extra = {"training": tc.to_dict(), "seed": seed, "normalize": normalize,
                 "system": args.system, "segmenter": args.segmenter,
                 "classes": list(ds.vocab.classes), "log": lg.to_dict()}
        save_seq2seq(_out(args.out), model, extra)
    print(f"trained {args.system} for {tc.epochs} epochs; best epoch {lg.best_epoch}; "
          f"wrote {_out(args.out)}")


def _predict(doc: dict, ds: Dataset, samples, refine: str, window: int, threshold: float,
             segmenter_path: str | None):
    """Predicted class-index sequences (and frame labels for segmenters)."""
    normalize = doc.get("normalize", True)
    if doc["kind"] == "segmenter":
        model = load_segmenter(doc)
        probs = predict_probs(model, [_inputs(s, normalize) for s in samples])
        if refine == "smooth":
            frames = [smooth_refine(p, window).labels for p in probs]
        elif refine == "boundary":
            frames = [boundary_refine(p, threshold).labels for p in probs]
        else:
            frames = [p.argmax() for p in probs]
        return [collapse(f) for f in frames], frames
    model = load_seq2seq(doc)
    if doc.get("system") == "seg2seq" or model.config.input_kind == "probs":
        path = segmenter_path or doc.get("segmenter")
        if not path:
            raise ConfigError("seg2seq inference needs --segmenter CHECKPOINT")
        seg_doc = load_checkpoint(path)
        seg = load_segmenter(seg_doc)
        inputs = [p.probs for p in predict_probs(
            seg, [_inputs(s, seg_doc.get("normalize", True)) for s in samples])]
    else:
        inputs = [_inputs(s, normalize) for s in samples]
    return infer_sequences(inputs, model), None


def _check_classes(doc: dict, ds: Dataset) -> None:
    classes = doc.get("classes")
    if classes is not None and list(classes) != list(ds.vocab.classes):
        raise ConfigError("checkpoint classes differ from the dataset's")


def cmd_infer(args) -> None:
    cfg = _resolve({"split": "test", "refine": "none", "window": 15, "threshold": 0.5},
                   _config(args), {"split": args.split, "refine": args.refine,
                                   "window": args.window, "threshold": args.threshold})
    ds = read_dataset(args.data)
    doc = load_checkpoint(args.checkpoint)
    _check_classes(doc, ds)
    samples = ds.split(cfg["split"])
    seqs, _ = _predict(doc, ds, samples, cfg["refine"], cfg["window"], cfg["threshold"],
                       args.segmenter)
    write_predictions(_out(args.out), [(s.sample_id, ds.vocab.decode(q))
                                       for s, q in zip(samples, seqs)])
    n_tok = sum(len(q) for q in seqs)
    print(f"decoded {len(samples)} sequences ({n_tok} actions) to {_out(args.out)}")


def _paired(args, ds: Dataset):
    preds = read_predictions(args.predictions)
    index = ds.by_id()
    missing = [i for i, _ in preds if i not in index]
    if missing:
        raise FormatError(f"predictions for unknown samples: {missing[:5]}")
    samples = [index[i] for i, _ in preds]
    seqs = [ds.vocab.encode(names) for _, names in preds]
    return samples, seqs


def cmd_eval(args) -> None:
    cfg = _resolve({"replicates": 1000}, _config(args), {"replicates": args.replicates})
    seed = args.seed if args.seed is not None else _config(args).get("seed", 0)
    ds = read_dataset(args.data)
    samples, seqs = _paired(args, ds)
    report = evaluate([s.sequence for s in samples], seqs, ds.vocab.classes,
                      replicates=cfg["replicates"], seed=seed)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": FORMAT_VERSION, **report.to_dict(),
           "config": {"replicates": cfg["replicates"], "seed": seed,
                      "predictions": str(args.predictions)}}
    dump_json(out / "metrics.json", doc)
    (out / "metrics.csv").write_text(report_csv([report.csv_row()]))
    print(" ".join(f"{k}={v:.4f}" for k, v in report.values.items()))


def cmd_count(args) -> None:
    ds = read_dataset(args.data)
    samples, seqs = _paired(args, ds)
    key = args.group_key or _config(args).get("group_key", "group")
    groups = [str(s.features.metadata.get(key, s.sample_id)) for s in samples]
    rows = count_report([s.sequence for s in samples], seqs, groups, ds.vocab.classes)
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_csv(rows))
    print(f"wrote counts for {len(set(groups))} groups to {out}")


def cmd_collapse(args) -> None:
    text = Path(args.labels).read_text() if args.labels != "-" else sys.stdin.read()
    rows = [r.strip() for r in text.splitlines() if r.strip()]
    classes = args.classes.split(",") if args.classes else _config(args).get("classes")
    if all(r.lstrip("-").isdigit() for r in rows):
        seq = list(collapse([int(r) for r in rows]))
        out = LabelVocab(tuple(classes)).decode(seq) if classes else seq
    else:
        if classes:
            vocab = LabelVocab(tuple(classes))
            out = vocab.decode(collapse(vocab.encode(rows)))
        else:
            out = [r for k, r in enumerate(rows) if k == 0 or rows[k - 1] != r]
    print(json.dumps(out))


def cmd_boundary_report(args) -> None:
    cfg = _resolve({"split": "test", "refine": "none", "window": 15, "threshold": 0.5,
                    "edges": None, "tolerance": None}, _config(args),
                   {"split": args.split, "refine": args.refine, "window": args.window,
                    "threshold": args.threshold,
                    "edges": [float(v) for v in args.edges.split(",")] if args.edges else None,
                    "tolerance": args.tolerance})
    ds = read_dataset(args.data)
    doc = load_checkpoint(args.checkpoint)
    if doc["kind"] != "segmenter":
        raise ConfigError("boundary-report needs a segmenter checkpoint")
    _check_classes(doc, ds)
    samples = ds.split(cfg["split"])
    _, frames = _predict(doc, ds, samples, cfg["refine"], cfg["window"], cfg["threshold"], None)
    buckets = buckets_from_edges(cfg["edges"]) if cfg["edges"] else None
    rep = None
    for s, f in zip(samples, frames):
        r = boundary_accuracy_by_duration(s.frame_labels, boundaries_of(f), buckets,
                                          cfg["tolerance"])
        rep = r if rep is None else rep.merge(r)
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_csv(rep.to_rows()))
    print("accuracy by duration bucket: " + ", ".join(
        f"[{b.low:g},{b.high:g})={'-' if b.accuracy is None else f'{b.accuracy:.3f}'}"
        for b in rep.buckets))


def cmd_run_plan(args) -> None:
    doc = load_json(args.plan)
    doc.update(_config(args))
    if args.seed is not None:
        doc["seed"] = args.seed
    plan = ExperimentPlan.from_dict(doc)
    out = _out(args.out)
    bundle = run_plan(plan, out)
    for name, rep in bundle.reports.items():
        vals = " ".join(f"{k}={v:.4f}" for k, v in rep.values.items())
        print(f"{name}: {vals}")
    print(f"run directory: {out}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actseq", description="Action-sequence identification toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="JSON file with settings")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic dataset directory")
    sp.add_argument("--profile", default=None, help="stroke-like or mixed-durations")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model on a dataset's train split")
    sp.add_argument("--system", required=True, choices=["segmenter", "raw2seq", "seg2seq"])
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--segmenter", default=None, help="segmenter checkpoint (seg2seq)")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--batch-size", type=int, default=None)

    def refine_opts(sp):
        sp.add_argument("--split", default=None)
        sp.add_argument("--refine", default=None, choices=["none", "smooth", "boundary"])
        sp.add_argument("--window", type=int, default=None)
        sp.add_argument("--threshold", type=float, default=None)

    sp = add("infer", cmd_infer, "decode a split into predicted sequences (JSONL)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--segmenter", default=None)
    refine_opts(sp)

    sp = add("eval", cmd_eval, "score predictions against ground truth")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="directory for metrics.json / metrics.csv")
    sp.add_argument("--replicates", type=int, default=None)

    sp = add("count", cmd_count, "per-group class counts of predictions vs ground truth")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--group-key", default=None)

    sp = add("collapse", cmd_collapse, "collapse a frame-label CSV into a sequence")
    sp.add_argument("labels", help="CSV with one label per row, or - for stdin")
    sp.add_argument("--classes", default=None, help="comma-separated class names")

    sp = add("boundary-report", cmd_boundary_report, "boundary accuracy by action duration")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--edges", default=None, help="comma-separated bucket edges in seconds")
    sp.add_argument("--tolerance", type=int, default=None, help="frames")
    refine_opts(sp)

    sp = add("run-plan", cmd_run_plan, "run an experiment plan")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ActSeqError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        print(f"error: format: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
