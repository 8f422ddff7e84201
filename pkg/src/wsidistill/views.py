"""Multi-crop view construction: global and local crops, the co-centered
coarse global view, the strong-color view, the block-shuffled view and the
token mask of the masked-modeling view.

Images are float tensors of shape (3, H, W) with values in [0, 1]. Every
function takes an explicit ``numpy.random.Generator``; equal generator state
gives bit-identical output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import DataConfig, ViewConfig
from .pyramid import Patch, PyramidManifest, co_centered_region, sample_patch

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
_SEED_MAX = 2**63 - 1


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float().div_(255.0)


def resize(img: torch.Tensor, size: int) -> torch.Tensor:
    if img.shape[-2:] == (size, size):
        return img.clone()
    return F.interpolate(img.unsqueeze(0), size=(size, size), mode="bilinear",
                         align_corners=False, antialias=True)[0]


def resized_crop(img: torch.Tensor, box: tuple[int, int, int, int], size: int) -> torch.Tensor:
    x, y, w, h = box
    return resize(img[:, y:y + h, x:x + w], size)


def center_box(height: int, width: int, scale: float) -> tuple[int, int, int, int]:
    side = max(1, int(round(math.sqrt(scale * height * width))))
    side = min(side, height, width)
    return (width - side) // 2, (height - side) // 2, side, side


def sample_crop_box(height: int, width: int, scale: tuple[float, float], rng: np.random.Generator,
                    ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Random box covering a uniform fraction of the area in ``scale`` with
    log-uniform aspect ratio; falls back to a centered box after 10 tries."""
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return x, y, w, h
    return center_box(height, width, scale[1])


# --------------------------------------------------------------------------
# photometric transforms


def grayscale(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(GRAY_WEIGHTS, dtype=img.dtype).view(3, 1, 1)
    return (img * w).sum(0, keepdim=True).expand(3, -1, -1).clone()


_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114],
                         [0.595716, -0.274453, -0.321263],
                         [0.211456, -0.522591, 0.311135]], dtype=torch.float64)
_YIQ2RGB = torch.linalg.inv(_RGB2YIQ)


def rotate_hue(img: torch.Tensor, angle: float) -> torch.Tensor:
    """Rotate chroma by ``angle`` radians around the luma axis (YIQ space)."""
    c, s = math.cos(angle), math.sin(angle)
    rot = torch.tensor([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=torch.float64)
    m = (_YIQ2RGB @ rot @ _RGB2YIQ).to(img.dtype)
    return torch.einsum("ij,jhw->ihw", m, img).clamp_(0.0, 1.0)


def adjust_brightness(img: torch.Tensor, factor: float) -> torch.Tensor:
    return (img * factor).clamp_(0.0, 1.0)


def adjust_contrast(img: torch.Tensor, factor: float) -> torch.Tensor:
    mean = grayscale(img).mean()
    return ((img - mean) * factor + mean).clamp_(0.0, 1.0)


def adjust_saturation(img: torch.Tensor, factor: float) -> torch.Tensor:
    gray = grayscale(img)
    return ((img - gray) * factor + gray).clamp_(0.0, 1.0)


BLUR_REFERENCE = 224


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    radius = min(radius, img.shape[-1] - 1, img.shape[-2] - 1)
    xs = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-(xs ** 2) / (2 * sigma * sigma))
    k = k / k.sum()
    x = F.pad(img.unsqueeze(0), (radius, radius, radius, radius), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(3, 1, 1, -1), groups=3)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(3, 1, -1, 1), groups=3)
    return x[0]


def base_augment(img: torch.Tensor, cfg: ViewConfig, rng: np.random.Generator) -> torch.Tensor:
    """Flip, mild color jitter, grayscale and blur shared by every crop."""
    if rng.uniform() < cfg.flip_p:
        img = img.flip(-1)
    if rng.uniform() < cfg.jitter_p:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        h = rng.uniform(-cfg.hue, cfg.hue) * 2 * math.pi
        img = adjust_saturation(adjust_contrast(adjust_brightness(img, b), c), s)
        img = rotate_hue(img, h)
    if rng.uniform() < cfg.base_gray_p:
        img = grayscale(img)
    if rng.uniform() < cfg.blur_p:
        # sigma is given for a 224 px view and scaled to the actual size
        img = gaussian_blur(img, rng.uniform(*cfg.blur_sigma) * img.shape[-1] / BLUR_REFERENCE)
    return img


# --------------------------------------------------------------------------
# view records


@dataclass
class MaskSpec:
    token_mask: np.ndarray  # bool, length n_tokens
    ratio: float


@dataclass
class PermutationSpec:
    grid: int
    perm: np.ndarray  # output block k holds input block perm[k]
    resized_from: int | None = None

    def inverse(self) -> np.ndarray:
        return np.argsort(self.perm)


@dataclass
class ViewSet:
    globals: list[torch.Tensor]
    locals: list[torch.Tensor]
    color_view: torch.Tensor | None = None
    shuffle_view: torch.Tensor | None = None
    shuffle_perm: PermutationSpec | None = None
    mask_spec: MaskSpec | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    source: tuple[str, tuple[int, int]] | None = None


def _child(rng: np.random.Generator) -> tuple[int, np.random.Generator]:
    seed = int(rng.integers(_SEED_MAX))
    return seed, np.random.default_rng(seed)


def _crop(img: torch.Tensor, scale: tuple[float, float], size: int, cfg: ViewConfig,
          rng: np.random.Generator) -> torch.Tensor:
    h, w = img.shape[-2:]
    if not cfg.augment:
        return resized_crop(img, center_box(h, w, scale[1]), size)
    view = resized_crop(img, sample_crop_box(h, w, scale, rng), size)
    return base_augment(view, cfg, rng)


def make_global_views(base: Patch, coarse: Patch | None, cfg: ViewConfig, rng: np.random.Generator,
                      seeds: dict | None = None) -> list[torch.Tensor]:
    """Two augmented crops of ``base`` plus, when ``coarse`` is given, a resize of it."""
    img = to_tensor(base.pixels)
    views = []
    for name in ("g1", "g2"):
        seed, child = _child(rng)
        if seeds is not None:
            seeds[name] = seed
        views.append(_crop(img, cfg.global_scale, cfg.global_size, cfg, child))
    if coarse is not None:
        views.append(resize(to_tensor(coarse.pixels), cfg.global_size))
    return views


def make_local_views(base: Patch, n: int, cfg: ViewConfig, rng: np.random.Generator,
                     seeds: dict | None = None) -> list[torch.Tensor]:
    if n < 1:
        raise ValueError("need at least one local view")
    img = to_tensor(base.pixels)
    views = []
    for i in range(n):
        seed, child = _child(rng)
        if seeds is not None:
            seeds[f"l{i}"] = seed
        views.append(_crop(img, cfg.local_scale, cfg.local_size, cfg, child))
    return views


def make_color_view(base: Patch, cfg: ViewConfig, rng: np.random.Generator,
                    seeds: dict | None = None) -> torch.Tensor:
    """A local crop followed by strong color transforms.

    With zero strengths and zero probabilities it equals the local crop that
    ``make_local_views(base, 1, cfg, rng)`` would produce from the same rng.
    """
    seed, child = _child(rng)
    if seeds is not None:
        seeds["color"] = seed
    view = _crop(to_tensor(base.pixels), cfg.local_scale, cfg.local_size, cfg, child)
    if cfg.color_brightness > 0:
        view = adjust_brightness(view, child.uniform(1 - cfg.color_brightness, 1 + cfg.color_brightness))
    if cfg.color_saturation > 0:
        view = adjust_saturation(view, child.uniform(1 - cfg.color_saturation, 1 + cfg.color_saturation))
    if cfg.color_hue > 0:
        view = rotate_hue(view, child.uniform(-cfg.color_hue, cfg.color_hue) * 2 * math.pi)
    if child.uniform() < cfg.channel_perm_p:
        view = view[torch.from_numpy(child.permutation(3))]
    if child.uniform() < cfg.gray_p:
        view = grayscale(view)
    return view


def shuffle_blocks(img: torch.Tensor, perm: np.ndarray, grid: int) -> torch.Tensor:
    c, h, w = img.shape
    bh, bw = h // grid, w // grid
    blocks = img.reshape(c, grid, bh, grid, bw).permute(1, 3, 0, 2, 4).reshape(grid * grid, c, bh, bw)
    blocks = blocks[torch.as_tensor(perm, dtype=torch.long)]
    return blocks.reshape(grid, grid, c, bh, bw).permute(2, 0, 3, 1, 4).reshape(c, h, w)


def make_shuffle_view(view: torch.Tensor, grid: int, rng: np.random.Generator,
                      perm: np.ndarray | None = None) -> tuple[torch.Tensor, PermutationSpec]:
    """Split into grid x grid blocks and rearrange them by a uniform random permutation."""
    if grid <= 0:
        raise ValueError("shuffle grid must be positive")
    resized_from = None
    side = view.shape[-1]
    if view.shape[-2] != side or side % grid:
        resized_from = side
        side = max(grid, int(round(side / grid)) * grid)
        view = resize(view, side)
    if perm is None:
        perm = rng.permutation(grid * grid)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(grid * grid)):
        raise ValueError("perm is not a permutation of the blocks")
    return shuffle_blocks(view, perm, grid), PermutationSpec(grid, perm, resized_from)


def unshuffle(img: torch.Tensor, spec: PermutationSpec) -> torch.Tensor:
    return shuffle_blocks(img, spec.inverse(), spec.grid)


def make_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Mask exactly round(ratio * n_tokens) token positions drawn without replacement."""
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    count = int(math.floor(ratio * n_tokens + 0.5))
    mask = np.zeros(n_tokens, dtype=bool)
    mask[rng.choice(n_tokens, size=count, replace=False)] = True
    return MaskSpec(mask, ratio)


# --------------------------------------------------------------------------
# full view sets and batches


def build_view_set(base: Patch, coarse: Patch | None, cfg: ViewConfig, n_tokens: int,
                   rng: np.random.Generator) -> ViewSet:
    seeds: dict[str, int] = {}
    globals_ = make_global_views(base, coarse if cfg.multiscale else None, cfg, rng, seeds)
    locals_ = make_local_views(base, cfg.n_local, cfg, rng, seeds)
    vs = ViewSet(globals_, locals_, seeds=seeds, source=(base.source_id, base.origin))
    if cfg.color_view:
        vs.color_view = make_color_view(base, cfg, rng, seeds)
    if cfg.shuffle_view:
        seed, child = _child(rng)
        seeds["shuffle"] = seed
        shuffled, vs.shuffle_perm = make_shuffle_view(globals_[0], cfg.shuffle_grid, child)
        vs.shuffle_view = resize(shuffled, cfg.local_size)
    if cfg.mim_view:
        seed, child = _child(rng)
        seeds["mask"] = seed
        vs.mask_spec = make_mask(n_tokens, cfg.mask_ratio, child)
    return vs


def sample_view_set(manifest: PyramidManifest, data: DataConfig, cfg: ViewConfig, n_tokens: int,
                    rng: np.random.Generator, slide: str | None = None) -> ViewSet:
    base = sample_patch(manifest, data.level, rng, mode=data.sample_mode, slide=slide)
    coarse = None
    if cfg.multiscale:
        coarse = co_centered_region(manifest, base, base.level + cfg.multiscale_level, cfg.multiscale_size)
    return build_view_set(base, coarse, cfg, n_tokens, rng)


@dataclass
class ViewBatch:
    """View sets of a batch stacked view-by-view."""

    globals: list[torch.Tensor]
    locals: list[torch.Tensor]
    color: torch.Tensor | None
    shuffle: torch.Tensor | None
    mask: torch.Tensor | None
    source_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.globals[0].shape[0]

    def to(self, dtype: torch.dtype) -> "ViewBatch":
        conv = lambda t: None if t is None else t.to(dtype)
        return ViewBatch([conv(g) for g in self.globals], [conv(v) for v in self.locals],
                         conv(self.color), conv(self.shuffle), self.mask, self.source_ids)


def collate(view_sets: list[ViewSet]) -> ViewBatch:
    if not view_sets:
        raise ValueError("empty batch")
    first = view_sets[0]
    stack = lambda xs: torch.stack(xs, dim=0)
    return ViewBatch(
        globals=[stack([vs.globals[i] for vs in view_sets]) for i in range(len(first.globals))],
        locals=[stack([vs.locals[i] for vs in view_sets]) for i in range(len(first.locals))],
        color=None if first.color_view is None else stack([vs.color_view for vs in view_sets]),
        shuffle=None if first.shuffle_view is None else stack([vs.shuffle_view for vs in view_sets]),
        mask=None if first.mask_spec is None else torch.from_numpy(
            np.stack([vs.mask_spec.token_mask for vs in view_sets])),
        source_ids=[vs.source[0] for vs in view_sets],
    )


class ViewStream:
    """Deterministic random-access stream of view batches.

    Batch ``step`` is a pure function of (seed, step): each epoch visits every
    slide ``samples_per_slide`` times in a seeded order, and sample ``i`` of
    epoch ``e`` draws from its own generator seeded by (seed, e, i).
    """

    def __init__(self, manifest: PyramidManifest, data: DataConfig, views: ViewConfig,
                 n_tokens: int, batch_size: int, seed: int):
        self.manifest, self.data, self.views = manifest, data, views
        self.n_tokens, self.batch_size, self.seed = n_tokens, batch_size, seed
        self.samples_per_epoch = len(manifest.slides) * data.samples_per_slide
        if self.samples_per_epoch < batch_size:
            raise ValueError("batch size exceeds samples per epoch")
        self.steps_per_epoch = self.samples_per_epoch // batch_size

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1, epoch])
        order = np.repeat(np.arange(len(self.manifest.slides)), self.data.samples_per_slide)
        return rng.permutation(order)

    def batch(self, step: int) -> ViewBatch:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = self._epoch_order(epoch)
        sets = []
        for i in range(k * self.batch_size, (k + 1) * self.batch_size):
            rng = np.random.default_rng([self.seed, 2, epoch, i])
            slide = self.manifest.slides[order[i]]
            sets.append(sample_view_set(self.manifest, self.data, self.views, self.n_tokens, rng, slide))
        return collate(sets)
