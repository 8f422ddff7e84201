"""Instance label map files and directory-level segmentation evaluation.

Two on-disk forms are supported:

* single-channel 16-bit PNG, pixel value = instance id;
* run-length text: a ``shape H W`` header, then one line per image row
  holding comma-separated ``id:start+len`` runs of non-zero pixels.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import MetricError, aji_components, dice, panoptic


class InstanceFormatError(ValueError):
    pass


def write_png(labels: np.ndarray, path: str | Path) -> Path:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InstanceFormatError("instance map must be 2-D")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise InstanceFormatError("instance ids must lie in [0, 65535] for 16-bit PNG")
    Image.fromarray(labels.astype(np.uint16)).save(path)
    return Path(path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise InstanceFormatError(f"{path}: expected a single-channel image")
    return arr.astype(np.int64)


def encode_rle(labels: np.ndarray) -> str:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InstanceFormatError("instance map must be 2-D")
    lines = [f"shape {labels.shape[0]} {labels.shape[1]}"]
    for row in labels:
        runs = []
        change = np.flatnonzero(np.diff(row)) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [len(row)]])
        for s, e in zip(starts, ends):
            if row[s] != 0:
                runs.append(f"{int(row[s])}:{s}+{e - s}")
        lines.append(",".join(runs))
    return "\n".join(lines) + "\n"


def decode_rle(text: str) -> np.ndarray:
    lines = text.split("\n")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "shape":
        raise InstanceFormatError("missing 'shape H W' header")
    h, w = int(head[1]), int(head[2])
    rows = lines[1:1 + h]
    if len(rows) < h:
        raise InstanceFormatError(f"expected {h} rows, found {len(rows)}")
    out = np.zeros((h, w), dtype=np.int64)
    for y, line in enumerate(rows):
        if not line.strip():
            continue
        for run in line.split(","):
            try:
                ident, span = run.split(":")
                start, length = span.split("+")
                ident, start, length = int(ident), int(start), int(length)
            except ValueError as exc:
                raise InstanceFormatError(f"row {y}: bad run {run!r}") from exc
            if start < 0 or length <= 0 or start + length > w:
                raise InstanceFormatError(f"row {y}: run {run!r} outside the row")
            out[y, start:start + length] = ident
    return out


def write_rle(labels: np.ndarray, path: str | Path) -> Path:
    Path(path).write_text(encode_rle(labels))
    return Path(path)


def read_rle(path: str | Path) -> np.ndarray:
    return decode_rle(Path(path).read_text())


READERS = {".png": read_png, ".rle": read_rle, ".txt": read_rle}


def read_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    reader = READERS.get(path.suffix.lower())
    if reader is None:
        raise InstanceFormatError(f"{path}: unknown instance map format")
    return reader(path)


def list_maps(directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InstanceFormatError(f"{directory} is not a directory")
    maps: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in READERS:
            if p.stem in maps:
                raise InstanceFormatError(f"two maps named {p.stem!r} in {directory}")
            maps[p.stem] = p
    return maps


def evaluate_dirs(gt_dir: str | Path, pred_dir: str | Path, pooled: bool = False) -> tuple[list[dict], dict]:
    """Per-image DICE/AJI/DQ/SQ/PQ for every GT map, plus an aggregate row.

    The aggregate is the per-image mean by default; ``pooled`` sums the
    intersection/union and match counts over all images instead.
    """
    gts, preds = list_maps(gt_dir), list_maps(pred_dir)
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise MetricError(f"no prediction for {missing[:5]}")
    if not gts:
        raise MetricError(f"no instance maps in {gt_dir}")
    rows = []
    acc = {"inter": 0, "sizes": 0, "aji_i": 0, "aji_u": 0, "tp": 0, "fp": 0, "fn": 0, "iou": 0.0}
    for name, path in gts.items():
        gt, pred = read_map(path), read_map(preds[name])
        pb = panoptic(gt, pred)
        ai, au = aji_components(gt, pred)
        fg_g, fg_p = gt > 0, pred > 0
        rows.append({"image": name, "dice": dice(fg_g, fg_p), "aji": ai / au if au else 1.0,
                     "dq": pb.dq, "sq": pb.sq, "pq": pb.pq})
        acc["inter"] += int(np.logical_and(fg_g, fg_p).sum())
        acc["sizes"] += int(fg_g.sum() + fg_p.sum())
        acc["aji_i"] += ai
        acc["aji_u"] += au
        acc["tp"] += len(pb.tp_pairs)
        acc["fp"] += len(pb.fp_ids)
        acc["fn"] += len(pb.fn_ids)
        acc["iou"] += sum(t[2] for t in pb.tp_pairs)
    if pooled:
        denom = acc["tp"] + 0.5 * (acc["fp"] + acc["fn"])
        dq = acc["tp"] / denom if denom else 0.0
        sq = acc["iou"] / acc["tp"] if acc["tp"] else 0.0
        agg = {"image": "pooled", "dice": 2 * acc["inter"] / acc["sizes"] if acc["sizes"] else 1.0,
               "aji": acc["aji_i"] / acc["aji_u"] if acc["aji_u"] else 1.0, "dq": dq, "sq": sq, "pq": dq * sq}
    else:
        agg = {"image": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in ("dice", "aji", "dq", "sq", "pq")}}
    return rows, agg
