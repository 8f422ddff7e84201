"""Tiled multi-resolution image pyramids, a synthetic pyramid generator and
patch sampling.

On disk a dataset is a directory holding ``manifest.json``, ``labels.tsv``
(``slide_id<TAB>class_index`` per line) and PNG tiles addressed by the
per-level ``tile_uri_template``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.tsv"
MANIFEST_VERSION = 1


class PyramidError(ValueError):
    pass


@dataclass
class LevelEntry:
    level: int
    width_px: int
    height_px: int
    tile_grid: tuple[int, int]  # rows, cols
    tile_uri_template: str
    pad_right: int = 0
    pad_bottom: int = 0

    @property
    def scale_factor(self) -> int:
        return 2 ** self.level


@dataclass
class PyramidManifest:
    dataset_id: str
    levels: list[LevelEntry]
    slides: list[str]
    tile_size: int = 256
    channels: int = 3
    root: Path | None = field(default=None, compare=False, repr=False)

    def level(self, level: int) -> LevelEntry:
        if not 0 <= level < len(self.levels):
            raise PyramidError(f"level {level} not in pyramid with {len(self.levels)} levels")
        return self.levels[level]

    def tile_path(self, slide: str, level: int, row: int, col: int) -> Path:
        if self.root is None:
            raise PyramidError("manifest has no root directory attached")
        uri = self.level(level).tile_uri_template.format(slide=slide, level=level, row=row, col=col)
        return self.root / uri

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        d["format"] = "pyramid-manifest"
        d["version"] = MANIFEST_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "PyramidManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise PyramidError(f"unsupported manifest version {d.get('version')!r}")
        levels = [LevelEntry(**{**lv, "tile_grid": tuple(lv["tile_grid"])}) for lv in d["levels"]]
        return cls(
            dataset_id=d["dataset_id"],
            levels=levels,
            slides=list(d["slides"]),
            tile_size=d["tile_size"],
            channels=d["channels"],
            root=root,
        )


def write_manifest(manifest: PyramidManifest, path: str | Path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path: str | Path) -> PyramidManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PyramidError(f"cannot read manifest {path}: {exc}") from exc
    return PyramidManifest.from_dict(raw, root=path.parent)


def write_labels(labels: dict[str, int], root: str | Path) -> Path:
    path = Path(root) / LABELS_NAME
    path.write_text("".join(f"{sid}\t{c}\n" for sid, c in labels.items()), encoding="utf-8")
    return path


def load_labels(root: str | Path) -> dict[str, int]:
    root = Path(root)
    if root.is_file():
        root = root.parent
    labels = {}
    for line in (root / LABELS_NAME).read_text(encoding="utf-8").splitlines():
        if line.strip():
            sid, c = line.split("\t")
            labels[sid] = int(c)
    return labels


@dataclass
class Patch:
    pixels: np.ndarray  # H x W x 3 uint8
    level: int
    origin: tuple[int, int]  # (x, y) in level pixel coordinates
    source_id: str

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[0]

    @property
    def center(self) -> tuple[float, float]:
        w, h = self.size
        return self.origin[0] + w / 2, self.origin[1] + h / 2

    def footprint(self) -> tuple[int, int, int, int]:
        """(x0, y0, width, height) of the patch in level-0 pixels."""
        s = 2 ** self.level
        w, h = self.size
        return self.origin[0] * s, self.origin[1] * s, w * s, h * s


# --------------------------------------------------------------------------
# pyramid construction


def downsample2x(img: np.ndarray) -> np.ndarray:
    """2x2 area mean of an HxWx3 uint8 image, rounding half up.

    Odd trailing rows/columns are edge-replicated so the output has
    ceil(H/2) x ceil(W/2) pixels.
    """
    h, w = img.shape[:2]
    img = np.pad(img, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    s = img.reshape(img.shape[0] // 2, 2, img.shape[1] // 2, 2, -1).astype(np.uint32).sum(axis=(1, 3))
    return ((s + 2) // 4).astype(np.uint8)


def build_levels(level0: np.ndarray, tile_size: int) -> list[np.ndarray]:
    levels = [level0]
    while max(levels[-1].shape[:2]) > tile_size:
        levels.append(downsample2x(levels[-1]))
    return levels


def _level_entry(level: int, img: np.ndarray, tile_size: int) -> LevelEntry:
    h, w = img.shape[:2]
    rows, cols = math.ceil(h / tile_size), math.ceil(w / tile_size)
    return LevelEntry(
        level=level,
        width_px=w,
        height_px=h,
        tile_grid=(rows, cols),
        tile_uri_template="{slide}/L{level}/{row}_{col}.png",
        pad_right=cols * tile_size - w,
        pad_bottom=rows * tile_size - h,
    )


def write_slide_tiles(img: np.ndarray, entry: LevelEntry, slide: str, root: Path, tile_size: int) -> None:
    padded = np.pad(img, ((0, entry.pad_bottom), (0, entry.pad_right), (0, 0)), mode="reflect")
    rows, cols = entry.tile_grid
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
            path = root / entry.tile_uri_template.format(slide=slide, level=entry.level, row=r, col=c)
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.ascontiguousarray(tile), mode="RGB").save(path, format="PNG", compress_level=1)


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class TextureParams:
    """Per-class texture: stripe orientation (radians) and period (level-0 px),
    plus a blob radius for the coarse structure."""

    orientation: float
    period: float
    blob_radius: float


def default_texture_params(num_classes: int) -> list[TextureParams]:
    out = []
    for c in range(num_classes):
        out.append(TextureParams(
            orientation=(math.pi / 2) * c / (num_classes - 1) if num_classes > 1 else 0.0,
            period=48.0 + 24.0 * c,
            blob_radius=40.0 + 40.0 * c,
        ))
    return out


# haematoxylin-like dark and eosin-like light stain colours
STAIN_A = np.array([0.55, 0.28, 0.58])
STAIN_B = np.array([0.88, 0.72, 0.83])


@dataclass
class SyntheticSpec:
    num_slides: int = 64
    level0_size: int = 1024
    num_classes: int = 2
    texture_params: list[TextureParams] | None = None
    seed: int = 0
    tile_size: int = 256
    dataset_id: str = "synthetic"
    stain_jitter: float = 0.1  # half-width of the per-slide stain colour range

    def resolved_textures(self) -> list[TextureParams]:
        return self.texture_params or default_texture_params(self.num_classes)


def synth_slide(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int]:
    """Level-0 RGB image and class of slide ``index``; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    cls = index % spec.num_classes
    tex = spec.resolved_textures()[cls]
    n = spec.level0_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32)

    # per-slide nuisance: stain colours, contrast, orientation jitter
    j = spec.stain_jitter
    stain_a = np.clip(STAIN_A + rng.uniform(-j, j, 3), 0, 1).astype(np.float32)
    stain_b = np.clip(STAIN_B + rng.uniform(-j, j, 3), 0, 1).astype(np.float32)
    contrast = rng.uniform(0.5, 0.9)
    theta = tex.orientation + rng.normal(0.0, 0.08)
    phase = rng.uniform(0, 2 * np.pi)

    u = xx * np.cos(theta) + yy * np.sin(theta)
    stripes = np.sin(2 * np.pi * u / tex.period + phase)

    # coarse structure: class-sized blobs scattered over the slide
    blobs = np.zeros((n, n), dtype=np.float32)
    n_blobs = int(rng.integers(6, 12))
    for cx, cy in rng.uniform(0, n, size=(n_blobs, 2)):
        r = tex.blob_radius * rng.uniform(0.8, 1.2)
        x0, x1 = max(int(cx - 4 * r), 0), min(int(cx + 4 * r) + 1, n)
        y0, y1 = max(int(cy - 4 * r), 0), min(int(cy + 4 * r) + 1, n)
        if x0 >= x1 or y0 >= y1:
            continue
        d2 = (xx[y0:y1, x0:x1] - cx) ** 2 + (yy[y0:y1, x0:x1] - cy) ** 2
        np.maximum(blobs[y0:y1, x0:x1], np.exp(-d2 / (2 * r * r)), out=blobs[y0:y1, x0:x1])

    coarse = rng.standard_normal((n // 32 + 1, n // 32 + 1)).astype(np.float32)
    density = ndimage.zoom(ndimage.gaussian_filter(coarse, 1.5), 32, order=1)[:n, :n]
    density = density / (np.abs(density).max() + 1e-6)
    noise = ndimage.gaussian_filter(rng.standard_normal((n, n, 3)).astype(np.float32), sigma=(1.5, 1.5, 0))

    t = 0.5 + 0.5 * contrast * stripes * (0.6 + 0.4 * density) - 0.35 * blobs
    t = np.clip(t, 0.0, 1.0)[..., None]
    img = stain_a * (1 - t) + stain_b * t + 0.06 * noise
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8), cls


def generate_synthetic_pyramid(spec: SyntheticSpec, out_dir: str | Path) -> PyramidManifest:
    if spec.num_classes <= 0:
        raise PyramidError("synthetic spec needs at least one class")
    if spec.level0_size < 4 * spec.tile_size:
        raise PyramidError("level0_size must be at least 4 x tile_size")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    slides, labels, entries = [], {}, None
    for i in range(spec.num_slides):
        sid = f"slide_{i:04d}"
        level0, cls = synth_slide(spec, i)
        levels = build_levels(level0, spec.tile_size)
        slide_entries = [_level_entry(k, img, spec.tile_size) for k, img in enumerate(levels)]
        entries = entries or slide_entries
        for entry, img in zip(slide_entries, levels):
            write_slide_tiles(img, entry, sid, root, spec.tile_size)
        slides.append(sid)
        labels[sid] = cls
    manifest = PyramidManifest(
        dataset_id=spec.dataset_id,
        levels=entries or [],
        slides=slides,
        tile_size=spec.tile_size,
        root=root,
    )
    write_manifest(manifest, root)
    write_labels(labels, root)
    return manifest


# --------------------------------------------------------------------------
# reading and sampling


@lru_cache(maxsize=2048)
def _read_tile(path: str, tile_size: int) -> np.ndarray:
    with Image.open(path) as im:
        tile = np.asarray(im.convert("RGB"))
    if tile.shape != (tile_size, tile_size, 3):
        raise PyramidError(f"tile {path} has shape {tile.shape}")
    tile.setflags(write=False)
    return tile


def _assemble(manifest: PyramidManifest, slide: str, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Pixels of the level-``level`` window (x, y, w, h), decoding only the tiles it touches."""
    if manifest.root is None:
        raise PyramidError("manifest has no root directory attached")
    t = manifest.tile_size
    out = np.empty((h, w, 3), dtype=np.uint8)
    for r in range(y // t, (y + h - 1) // t + 1):
        for c in range(x // t, (x + w - 1) // t + 1):
            tile = _read_tile(str(manifest.tile_path(slide, level, r, c)), t)
            y0, y1 = max(y, r * t), min(y + h, (r + 1) * t)
            x0, x1 = max(x, c * t), min(x + w, (c + 1) * t)
            out[y0 - y:y1 - y, x0 - x:x1 - x] = tile[y0 - r * t:y1 - r * t, x0 - c * t:x1 - c * t]
    return out


def read_level(manifest: PyramidManifest, slide: str, level: int) -> np.ndarray:
    """Full level image (without padding) of one slide."""
    e = manifest.level(level)
    return _assemble(manifest, slide, level, 0, 0, e.width_px, e.height_px)


def read_region(manifest: PyramidManifest, slide: str, level: int, x: int, y: int, size: int) -> Patch:
    e = manifest.level(level)
    if x < 0 or y < 0 or x + size > e.width_px or y + size > e.height_px:
        raise PyramidError(f"region ({x},{y},{size}) outside level {level} bounds {e.width_px}x{e.height_px}")
    return Patch(_assemble(manifest, slide, level, x, y, size, size), level, (x, y), slide)


def sample_patch(
    manifest: PyramidManifest,
    level: int,
    rng: np.random.Generator,
    mode: str = "uniform",
    slide: str | None = None,
    size: int | None = None,
) -> Patch:
    """Draw one ``size`` (default tile_size) patch fully inside the level.

    ``mode="tile"`` picks a tile-aligned origin, ``"uniform"`` any integer origin.
    The slide is drawn uniformly when not given.
    """
    e = manifest.level(level)
    size = size or manifest.tile_size
    if e.width_px < size or e.height_px < size:
        raise PyramidError(f"level {level} ({e.width_px}x{e.height_px}) smaller than patch size {size}")
    if slide is None:
        slide = manifest.slides[int(rng.integers(len(manifest.slides)))]
    if mode == "uniform":
        x = int(rng.integers(0, e.width_px - size + 1))
        y = int(rng.integers(0, e.height_px - size + 1))
    elif mode == "tile":
        cols = (e.width_px - size) // manifest.tile_size + 1
        rows = (e.height_px - size) // manifest.tile_size + 1
        x = int(rng.integers(cols)) * manifest.tile_size
        y = int(rng.integers(rows)) * manifest.tile_size
    else:
        raise PyramidError(f"unknown sampling mode {mode!r}")
    return read_region(manifest, slide, level, x, y, size)


def co_centered_window(base: Patch, target_level: int, size_px: int, level_w: int, level_h: int) -> tuple[int, int]:
    """Origin of the ``size_px`` window at ``target_level`` sharing ``base``'s center, clamped to bounds."""
    if target_level <= base.level:
        raise PyramidError("target_level must be coarser than the base patch level")
    if size_px > level_w or size_px > level_h:
        raise PyramidError(f"level {target_level} smaller than region size {size_px}")
    scale = 2 ** (target_level - base.level)
    cx, cy = base.center
    x = int(round(cx / scale - size_px / 2))
    y = int(round(cy / scale - size_px / 2))
    return min(max(x, 0), level_w - size_px), min(max(y, 0), level_h - size_px)


def co_centered_region(manifest: PyramidManifest, base: Patch, target_level: int, size_px: int) -> Patch:
    e = manifest.level(target_level)
    x, y = co_centered_window(base, target_level, size_px, e.width_px, e.height_px)
    return read_region(manifest, base.source_id, target_level, x, y, size_px)


def iter_tiles(manifest: PyramidManifest, level: int):
    """Every full tile-aligned ``tile_size`` patch of every slide, in slide then row-major order."""
    e = manifest.level(level)
    t = manifest.tile_size
    for slide in manifest.slides:
        for y in range(0, e.height_px - t + 1, t):
            for x in range(0, e.width_px - t + 1, t):
                yield read_region(manifest, slide, level, x, y, t)
