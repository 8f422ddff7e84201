"""Vision transformer encoder, projection head, shuffle projector and the
student/teacher model pair."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .distill.losses import temperature_softmax

# fixed input normalisation for [0, 1] images
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        nn.init.trunc_normal_(module.weight, std=0.02)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class VisionTransformer(nn.Module):
    """Plain pre-norm ViT returning the class-token embedding.

    Inputs of a size other than ``cfg.image_size`` are accepted; the position
    grid is bicubically resampled to the new token grid.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = nn.Conv2d(3, d, kernel_size=p, stride=p)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.apply(_init_weights)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def num_tokens(self, size: int) -> int:
        return (size // self.cfg.patch_size) ** 2

    def _pos_embed(self, grid_h: int, grid_w: int) -> torch.Tensor:
        base = int(math.isqrt(self.pos_embed.shape[1] - 1))
        if (grid_h, grid_w) == (base, base):
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        d = patch_pos.shape[-1]
        grid = patch_pos.reshape(1, base, base, d).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(grid_h, grid_w), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, grid.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, d)], dim=1)

    def forward_tokens(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Return all output tokens, shape (B, 1 + N, D); index 0 is the class token."""
        b, c, h, w = x.shape
        p = self.cfg.patch_size
        if c != 3 or h % p or w % p:
            raise ValueError(f"input of shape {tuple(x.shape)} does not tile into {p}px tokens")
        tokens = self.patch_embed((x - PIXEL_MEAN) / PIXEL_STD).flatten(2).transpose(1, 2)
        if mask is not None:
            mask = torch.as_tensor(mask, device=x.device)
            if mask.dim() == 1:
                mask = mask.unsqueeze(0).expand(b, -1)
            if mask.shape != tokens.shape[:2]:
                raise ValueError(f"mask shape {tuple(mask.shape)} != token grid {tuple(tokens.shape[:2])}")
            tokens = torch.where(mask.unsqueeze(-1).bool(), self.mask_token.to(tokens.dtype), tokens)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self._pos_embed(h // p, w // p)
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward_tokens(x, mask)[:, 0]


class ProjectionHead(nn.Module):
    """3-layer MLP, L2 bottleneck, then a map onto ``out_dim`` logits whose
    weight rows are unit-normalized at every forward."""

    def __init__(self, in_dim: int, hidden: int, bottleneck: int, out_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        self.apply(_init_weights)
        self.last = nn.Parameter(torch.empty(out_dim, bottleneck))
        nn.init.trunc_normal_(self.last, std=0.02)

    @property
    def out_dim(self) -> int:
        return self.last.shape[0]

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(e), dim=-1, eps=1e-12)
        return z @ F.normalize(self.last, dim=-1, eps=1e-12).T


class ShuffleProjector(nn.Module):
    """Two-layer MLP mapping a shuffled-view embedding back onto the embedding space."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.apply(_init_weights)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.net(e)


class Student(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.encoder = VisionTransformer(cfg)
        self.head = ProjectionHead(cfg.embed_dim, cfg.head_hidden, cfg.head_bottleneck, cfg.out_dim)
        self.projector = ShuffleProjector(cfg.embed_dim, cfg.projector_hidden)


class Teacher(nn.Module):
    def __init__(self, encoder: VisionTransformer, head: ProjectionHead):
        super().__init__()
        self.encoder = encoder
        self.head = head


@dataclass
class ModelPair:
    cfg: EncoderConfig
    student: Student
    teacher: Teacher

    def shared_parameters(self) -> Iterator[tuple[str, nn.Parameter, nn.Parameter]]:
        """(name, student param, teacher param) for encoder and head."""
        t_params = dict(self.teacher.named_parameters())
        for name, p in self.student.named_parameters():
            if name.startswith(("encoder.", "head.")):
                yield name, p, t_params[name]

    def to(self, dtype: torch.dtype) -> "ModelPair":
        self.student.to(dtype)
        self.teacher.to(dtype)
        return self


def init_pair(cfg: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> ModelPair:
    """Student initialised from ``seed``; teacher is an exact, gradient-exempt copy."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        student = Student(cfg)
    student.to(dtype)
    teacher = Teacher(copy.deepcopy(student.encoder), copy.deepcopy(student.head))
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return ModelPair(cfg, student, teacher)


def encode(encoder: VisionTransformer, image: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Class-token embedding of one image (C, H, W) or a batch (B, C, H, W)."""
    single = image.dim() == 3
    out = encoder(image.unsqueeze(0) if single else image, mask)
    return out[0] if single else out


def project_prob(head: ProjectionHead, e: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature softmax of the head logits for embedding(s) ``e``."""
    return temperature_softmax(head(e), tau)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
