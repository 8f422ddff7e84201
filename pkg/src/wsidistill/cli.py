"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric divergence.
Every evaluation prints one JSON record per line on stdout and, when
``--log`` is given, appends it to that file too.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .adapter import (
    AdapterError,
    build_cache,
    combined_logits,
    embed,
    inject_low_rank,
    load_cache,
    load_low_rank_state,
    low_rank_finetune,
    low_rank_state,
    save_cache,
)
from .backbone import init_pair
from .config import Config, ConfigError, config_from_dict, load_config, with_seed
from .distill.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .distill.engine import DivergenceError, StepReport, init_train_state, run_training
from .harness.features import FeatureStore, FeatureStoreError, extract_features
from .harness.mil import BagDataset, attention_mil
from .harness.probe import linear_probe, probe_fractions
from .harness.report import ReportError, emit_report
from .instances import InstanceFormatError, evaluate_dirs
from .metrics import MetricError, accuracy, roc_auc
from .pyramid import PyramidError, SyntheticSpec, generate_synthetic_pyramid, iter_tiles, load_labels, load_manifest
from .views import ViewStream, resize, to_tensor

log = logging.getLogger("wsidistill")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
VALIDATION_ERRORS = (ConfigError, PyramidError, FeatureStoreError, MetricError, AdapterError, CheckpointError,
                     InstanceFormatError, ReportError, FileNotFoundError, ValueError)


class UsageError(ValueError):
    pass


def emit(record: dict, log_path: str | None = None) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line, flush=True)
    if log_path:
        with open(log_path, "a") as fh:
            fh.write(line + "\n")


def set_determinism(enabled: bool) -> None:
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def resolve_config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def load_encoder(cfg: Config, checkpoint: str | None, which: str = "teacher"):
    """Encoder from a checkpoint, or a freshly initialised one when no checkpoint is given."""
    if checkpoint is None:
        pair = init_pair(cfg.model, cfg.train.seed)
    else:
        pair = load_checkpoint(checkpoint, restore_rng=False).pair
    net = pair.teacher if which == "teacher" else pair.student
    return net.encoder.float()


def labeled_tiles(root: str, level: int, size: int):
    """All level tiles of a dataset as (images, tile labels, slide ids)."""
    manifest = load_manifest(root)
    labels = load_labels(root)
    images, y, ids = [], [], []
    for patch in iter_tiles(manifest, level):
        if patch.source_id not in labels:
            raise UsageError(f"slide {patch.source_id} has no label")
        images.append(resize(to_tensor(patch.pixels), size))
        y.append(labels[patch.source_id])
        ids.append(patch.source_id)
    if not images:
        raise UsageError(f"{root}: no tiles at level {level}")
    return torch.stack(images), np.array(y), ids


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    spec = SyntheticSpec(num_slides=args.slides, level0_size=args.size, num_classes=args.classes,
                         seed=args.seed or 0, tile_size=args.tile_size, stain_jitter=args.stain_jitter)
    manifest = generate_synthetic_pyramid(spec, args.out)
    emit({"event": "synth-data", "out": str(args.out), "slides": len(manifest.slides),
          "levels": len(manifest.levels)}, args.log)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    if args.data is not None:
        cfg = replace(cfg, data=replace(cfg.data, root=args.data))
    if not cfg.data.root:
        raise UsageError("no dataset: set [data] root in the config or pass --data")
    if args.deterministic:
        cfg = replace(cfg, data=replace(cfg.data, num_workers=0))
    manifest = load_manifest(cfg.data.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = ViewStream(manifest, cfg.data, cfg.views, cfg.model.num_patches, cfg.train.batch_size, cfg.train.seed)
    if args.resume:
        state = load_checkpoint(args.resume, expected=cfg)
    else:
        state = init_train_state(cfg, stream.steps_per_epoch)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    log_path = out / "train_log.jsonl"
    ckpt = out / "checkpoint.ckpt"

    def on_step(report: StepReport) -> None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps(report.record(), sort_keys=True) + "\n")
        if args.checkpoint_every and state.schedule.step % args.checkpoint_every == 0:
            save_checkpoint(state, ckpt)

    try:
        run_training(state, stream, steps=args.steps, on_step=on_step)
    except DivergenceError as exc:
        # the failing step never touched the parameters, so this is the last good state
        save_checkpoint(state, out / "last_good.ckpt")
        emit({"event": "diverged", "term": exc.term, "step": state.schedule.step}, args.log)
        return EXIT_DIVERGED
    save_checkpoint(state, ckpt)
    emit({"event": "pretrain", "step": state.schedule.step, "checkpoint": str(ckpt)}, args.log)
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = resolve_config(args)
    encoder = load_encoder(cfg, args.checkpoint, args.network)
    manifest = load_manifest(args.manifest)
    existing = FeatureStore.load(args.out) if args.append and Path(args.out).exists() else None
    store = extract_features(encoder, manifest, args.level, out=existing, batch_size=args.batch_size)
    store.save(args.out)
    emit({"event": "extract", "row_count": store.row_count, "dim": store.dim, "out": str(args.out)}, args.log)
    return EXIT_OK


def _probe_inputs(args):
    store = FeatureStore.load(args.features)
    labels = load_labels(args.labels)
    groups = store.source_ids()
    missing = sorted(set(groups) - set(labels))
    if missing:
        raise UsageError(f"no label for {missing[:5]}")
    return store, labels, groups


def cmd_probe(args) -> int:
    cfg = resolve_config(args)
    probe_cfg = replace(cfg.probe, kind=args.kind)
    store, labels, groups = _probe_inputs(args)
    records = []
    if args.kind == "linear":
        fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else [1.0]
        for frac, result in probe_fractions(store.matrix(), groups, labels, probe_cfg, fractions):
            records.append({"probe": "linear", "data_fraction": frac, "seed": probe_cfg.seed, **result})
    else:
        bags = BagDataset.from_groups(groups, labels)
        records.append({"probe": "mil", "seed": probe_cfg.seed, **attention_mil(store.matrix(), bags, probe_cfg)})
    for r in records:
        emit(r, args.log)
    if args.report:
        emit_report(records, args.report, stem=f"probe_{args.kind}")
    return EXIT_OK


def cmd_adapt_fewshot(args) -> int:
    cfg = resolve_config(args)
    encoder = load_encoder(cfg, args.checkpoint)
    level = cfg.data.level
    images, y, _ = labeled_tiles(args.train_manifest, level, encoder.cfg.image_size)
    rng = np.random.default_rng(cfg.train.seed)
    classes = np.unique(y)
    pick = []
    for c in classes:
        members = np.flatnonzero(y == c)
        if len(members) < args.shots:
            raise UsageError(f"class {c} has only {len(members)} tiles for {args.shots} shots")
        pick.extend(sorted(rng.choice(members, size=args.shots, replace=False).tolist()))
    support, support_y = images[pick], y[pick]
    cache = build_cache(encoder, support, support_y)
    meta = {"checkpoint": str(Path(args.checkpoint).resolve()) if args.checkpoint else None,
            "config": cfg.to_dict(), "level": level, "adapted": cfg.adapter.alpha_prime > 0}
    save_cache(cache, args.out, "cache", meta)
    if cfg.adapter.alpha_prime > 0:
        adapted = low_rank_finetune(encoder, support, support_y, cfg.adapter, seed=cfg.train.seed)
        save_cache(build_cache(adapted, support, support_y), args.out, "cache_adapted", meta)
        np.savez(Path(args.out) / "low_rank.npz", **low_rank_state(adapted))
    train_acc = accuracy(combined_logits(cache.keys, None, cache, None,
                                         replace(cfg.adapter, alpha=1.0, alpha_prime=0.0)).argmax(1), support_y)
    emit({"event": "adapt-fewshot", "shots": args.shots, "classes": len(classes), "support_acc": train_acc,
          "out": str(args.out)}, args.log)
    return EXIT_OK


def cmd_adapt_eval(args) -> int:
    cache, meta = load_cache(args.cache, "cache")
    cfg = config_from_dict(meta["config"])
    if args.config:
        cfg = replace(cfg, adapter=load_config(args.config).adapter)
    encoder = load_encoder(cfg, meta["checkpoint"])
    images, y, _ = labeled_tiles(args.test_manifest, meta["level"], encoder.cfg.image_size)
    f = embed(encoder, images)
    f_adapted, cache_adapted = None, None
    if meta.get("adapted") and cfg.adapter.alpha_prime > 0:
        cache_adapted, _ = load_cache(args.cache, "cache_adapted")
        adapted = inject_low_rank(encoder, cfg.adapter.rank)
        load_low_rank_state(adapted, dict(np.load(Path(args.cache) / "low_rank.npz")))
        f_adapted = embed(adapted, images)
    elif cfg.adapter.alpha_prime > 0:
        cfg = replace(cfg, adapter=replace(cfg.adapter, alpha_prime=0.0))
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    if f_adapted is not None:
        f_adapted = f_adapted / np.linalg.norm(f_adapted, axis=1, keepdims=True)
    scores = combined_logits(f, f_adapted, cache, cache_adapted, cfg.adapter)
    proba = np.exp(scores - scores.max(1, keepdims=True))
    proba /= proba.sum(1, keepdims=True)
    record = {"event": "adapt-eval", "shots": cache.shots, "acc": accuracy(scores.argmax(1), y), "n_test": len(y)}
    try:
        record["auc"] = roc_auc(proba if cache.num_classes > 2 else proba[:, 1], y)
    except MetricError:
        record["auc"] = float("nan")
    emit(record, args.log)
    return EXIT_OK


def cmd_eval_seg(args) -> int:
    rows, agg = evaluate_dirs(args.gt, args.pred, pooled=args.pooled)
    emit_report(rows + [agg], args.out, stem="segmentation", columns=["image", "dice", "aji", "dq", "sq", "pq"])
    emit({"event": "eval-seg", "images": len(rows), **{k: v for k, v in agg.items() if k != "image"}}, args.log)
    return EXIT_OK


def cmd_report(args) -> int:
    records = []
    for path in args.records:
        for line in Path(path).read_text().splitlines():
            if line.strip():
                records.append(json.loads(line))
    written = emit_report(records, args.out, stem=args.stem)
    emit({"event": "report", "records": len(records), "files": [str(p) for p in written]}, args.log)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="override the seed of the run")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    p.add_argument("--log", help="append JSON records to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsidistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic texture pyramid corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--slides", type=int, default=64)
    p.add_argument("--size", type=int, default=1024, help="level-0 edge length in pixels")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--tile-size", type=int, default=SyntheticSpec.tile_size)
    p.add_argument("--stain-jitter", type=float, default=SyntheticSpec.stain_jitter)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="self-distillation pretraining")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset root, overrides [data] root")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="embed every tile of a pyramid level into a feature store")
    _common(p)
    p.add_argument("--checkpoint", help="omit for a randomly initialised encoder")
    p.add_argument("--network", choices=("teacher", "student"), default="teacher")
    p.add_argument("--manifest", required=True, help="dataset root or manifest.json")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--append", action="store_true", help="append rows to an existing store")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="evaluate frozen features")
    probe_sub = p.add_subparsers(dest="kind", required=True)
    for kind in ("linear", "mil"):
        q = probe_sub.add_parser(kind)
        _common(q)
        q.add_argument("--features", required=True)
        q.add_argument("--labels", required=True, help="dataset root or labels.tsv")
        q.add_argument("--report", help="directory for the CSV table and plot")
        if kind == "linear":
            q.add_argument("--fractions", help="comma-separated training-data fractions, e.g. 0.01,0.05,0.1,1")
        q.set_defaults(func=cmd_probe)

    p = sub.add_parser("adapt", help="few-shot cache adaptation")
    adapt_sub = p.add_subparsers(dest="mode", required=True)
    q = adapt_sub.add_parser("fewshot")
    _common(q)
    q.add_argument("--train-manifest", required=True)
    q.add_argument("--shots", type=int, required=True)
    q.add_argument("--checkpoint")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_adapt_fewshot)
    q = adapt_sub.add_parser("eval")
    _common(q)
    q.add_argument("--cache", required=True)
    q.add_argument("--test-manifest", required=True)
    q.set_defaults(func=cmd_adapt_eval)

    p = sub.add_parser("eval", help="segmentation metrics")
    eval_sub = p.add_subparsers(dest="task", required=True)
    q = eval_sub.add_parser("seg")
    _common(q)
    q.add_argument("--gt", required=True)
    q.add_argument("--pred", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--pooled", action="store_true", help="pool counts over images instead of averaging")
    q.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("report", help="tables and plots from JSON-lines records")
    _common(p)
    p.add_argument("records", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--stem", default="metrics")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    set_determinism(args.deterministic)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
