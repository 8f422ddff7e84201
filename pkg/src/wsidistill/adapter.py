"""Few-shot key/value cache classifier and its low-rank fine-tuned branch.

Support embeddings are the keys, one-hot labels the values. A query scores
each class by the summed affinity ``exp(-beta * (1 - cos))`` to that class's
keys. The fine-tuned branch adds trainable rank-r factors to the query and
value projections of every attention block and rebuilds its own cache after
training.
"""
from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Attention, VisionTransformer
from .config import AdapterConfig
from .harness.features import FeatureStore, RowIndex


class AdapterError(ValueError):
    pass


@dataclass
class FewShotCache:
    keys: np.ndarray  # (N * K_shot, D), unit rows
    values: np.ndarray  # (N * K_shot, N), one-hot rows

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def shots(self) -> int:
        return len(self.keys) // self.num_classes

    @property
    def labels(self) -> np.ndarray:
        return self.values.argmax(axis=1)

    def check(self) -> "FewShotCache":
        norms = np.linalg.norm(self.keys, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise AdapterError("cache keys must have unit norm")
        if not (np.all(self.values.sum(axis=1) == 1) and np.all((self.values == 0) | (self.values == 1))):
            raise AdapterError("cache values must be one-hot rows")
        return self


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def check_support(labels, num_classes: int | None = None) -> tuple[int, int]:
    """Validate that every class has the same number of shots; return (N, K_shot)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = num_classes if num_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n)
    if np.any(counts == 0):
        raise AdapterError(f"class(es) {np.nonzero(counts == 0)[0].tolist()} have no support images")
    if len(set(counts.tolist())) != 1:
        raise AdapterError(f"unequal shots per class: {counts.tolist()}")
    return n, int(counts[0])


def cache_from_features(features: np.ndarray, labels, num_classes: int | None = None) -> FewShotCache:
    n, _ = check_support(labels, num_classes)
    f = np.asarray(features, dtype=np.float64)
    keys = f / np.linalg.norm(f, axis=1, keepdims=True).clip(min=1e-12)
    return FewShotCache(keys, one_hot(labels, n)).check()


@torch.no_grad()
def embed(encoder: VisionTransformer, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = [encoder(images[i:i + batch_size].to(dtype)).double().numpy() for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, encoder.embed_dim))


def build_cache(encoder: VisionTransformer, images: torch.Tensor, labels, num_classes: int | None = None
                ) -> FewShotCache:
    """Keys are normalized class-token embeddings in input order."""
    check_support(labels, num_classes)
    return cache_from_features(embed(encoder, images), labels, num_classes)


def affinities(f_test: np.ndarray, cache: FewShotCache, beta: float) -> np.ndarray:
    if beta <= 0:
        raise AdapterError("beta must be positive")
    f = np.atleast_2d(np.asarray(f_test, dtype=np.float64))
    if f.shape[1] != cache.keys.shape[1]:
        raise AdapterError(f"query dim {f.shape[1]} != key dim {cache.keys.shape[1]}")
    return np.exp(-beta * (1.0 - f @ cache.keys.T))


def cache_logits(a: np.ndarray, cache: FewShotCache) -> np.ndarray:
    a = np.atleast_2d(a)
    if a.shape[1] != len(cache.values):
        raise AdapterError(f"{a.shape[1]} affinities for {len(cache.values)} cache rows")
    return a @ cache.values


def normalize_rows(f: np.ndarray) -> np.ndarray:
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    return f / np.linalg.norm(f, axis=1, keepdims=True).clip(min=1e-12)


def combined_logits(f_test: np.ndarray, f_test_adapted: np.ndarray | None, cache: FewShotCache,
                    cache_adapted: FewShotCache | None, cfg: AdapterConfig) -> np.ndarray:
    """alpha * A L + alpha' * A' L'; the primed branch is skipped when alpha' = 0."""
    if cfg.alpha == 0 and cfg.alpha_prime == 0:
        raise AdapterError("alpha = alpha' = 0 gives all-zero scores")
    out = cfg.alpha * cache_logits(affinities(f_test, cache, cfg.beta), cache)
    if cfg.alpha_prime != 0:
        if f_test_adapted is None or cache_adapted is None:
            raise AdapterError("alpha' > 0 needs the adapted features and cache")
        out = out + cfg.alpha_prime * cache_logits(affinities(f_test_adapted, cache_adapted, cfg.beta), cache_adapted)
    return out


# --------------------------------------------------------------------------
# low-rank adaptation


class LowRankQKV(nn.Module):
    """Frozen fused qkv projection plus trainable rank-r updates on q and v."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        d = base.in_features
        if base.out_features != 3 * d:
            raise AdapterError("expected a fused qkv projection")
        if not 1 <= rank < d:
            raise AdapterError(f"rank {rank} must be in [1, {d})")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        self.down_q = nn.Parameter(torch.empty(d, rank, dtype=dtype))
        self.up_q = nn.Parameter(torch.zeros(rank, d, dtype=dtype))
        self.down_v = nn.Parameter(torch.empty(d, rank, dtype=dtype))
        self.up_v = nn.Parameter(torch.zeros(rank, d, dtype=dtype))
        nn.init.kaiming_uniform_(self.down_q, a=5 ** 0.5)
        nn.init.kaiming_uniform_(self.down_v, a=5 ** 0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        dq = (x @ self.down_q) @ self.up_q
        dv = (x @ self.down_v) @ self.up_v
        return out + torch.cat([dq, torch.zeros_like(dq), dv], dim=-1)


def inject_low_rank(encoder: VisionTransformer, rank: int, seed: int = 0) -> VisionTransformer:
    """Deep copy of ``encoder`` with every weight frozen and low-rank factors on q/v."""
    adapted = copy.deepcopy(encoder)
    for p in adapted.parameters():
        p.requires_grad_(False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for module in adapted.modules():
            if isinstance(module, Attention):
                module.qkv = LowRankQKV(module.qkv, rank)
    return adapted


def low_rank_parameters(encoder: nn.Module) -> list[nn.Parameter]:
    return [p for m in encoder.modules() if isinstance(m, LowRankQKV) for p in (m.down_q, m.up_q, m.down_v, m.up_v)]


def low_rank_state(encoder: nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy() for name, p in encoder.named_parameters()
            if name.rsplit(".", 1)[-1] in ("down_q", "up_q", "down_v", "up_v")}


def load_low_rank_state(encoder: nn.Module, state: dict[str, np.ndarray]) -> None:
    params = dict(encoder.named_parameters())
    with torch.no_grad():
        for name, value in state.items():
            if name not in params:
                raise AdapterError(f"unknown low-rank factor {name}")
            params[name].copy_(torch.from_numpy(np.asarray(value)))


def low_rank_finetune(encoder: VisionTransformer, images: torch.Tensor, labels, cfg: AdapterConfig,
                      seed: int = 0, epochs: int | None = None) -> VisionTransformer:
    """Train only the low-rank factors on the support set.

    The objective is cross-entropy of the adapted cache logits: each support
    image queries the cache of the other support images (leave-one-out; with
    a single shot per class the image's own key stays in).
    """
    n, shots = check_support(labels)
    adapted = inject_low_rank(encoder, cfg.rank, seed)
    params = low_rank_parameters(adapted)
    epochs = cfg.finetune_epochs if epochs is None else epochs
    dtype = next(adapted.parameters()).dtype
    x = images.to(dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    values = torch.from_numpy(one_hot(labels, n)).to(dtype)
    keep = torch.ones(len(y), len(y), dtype=dtype)
    if shots > 1:
        keep.fill_diagonal_(0.0)
    opt = torch.optim.AdamW(params, lr=cfg.finetune_lr, weight_decay=0.0)
    adapted.train()
    for _ in range(epochs):
        f = F.normalize(adapted(x), dim=-1)
        a = torch.exp(-cfg.beta * (1.0 - f @ f.T)) * keep
        logits = (a @ values) * cfg.logit_scale / shots
        loss = F.cross_entropy(logits, y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    adapted.eval()
    return adapted


# --------------------------------------------------------------------------
# model selection and persistence


def grid_search(f_val: np.ndarray, f_val_adapted: np.ndarray | None, y_val, cache: FewShotCache,
                cache_adapted: FewShotCache | None, base: AdapterConfig, betas=(1.0, 3.0, 5.5, 7.5, 10.0),
                alphas=(1.0,), alpha_primes=(0.0, 0.5, 1.0, 2.0)) -> tuple[AdapterConfig, float]:
    """Best (beta, alpha, alpha') by validation accuracy; the first grid point wins ties."""
    y = np.asarray(y_val)
    best: tuple[AdapterConfig, float] | None = None
    for beta, alpha, alpha_p in itertools.product(betas, alphas, alpha_primes):
        if (alpha == 0 and alpha_p == 0) or (alpha_p and cache_adapted is None):
            continue
        cfg = AdapterConfig(**{**base.__dict__, "beta": beta, "alpha": alpha, "alpha_prime": alpha_p})
        acc = float(np.mean(combined_logits(f_val, f_val_adapted, cache, cache_adapted, cfg).argmax(1) == y))
        if best is None or acc > best[1]:
            best = (cfg, acc)
    if best is None:
        raise AdapterError("empty search grid")
    return best


def save_cache(cache: FewShotCache, out_dir: str | Path, name: str = "cache", meta: dict | None = None) -> Path:
    """Keys go into a feature store, labels and settings into a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = FeatureStore(cache.keys.shape[1])
    labels = cache.labels
    store.append(cache.keys.astype(np.float32), [RowIndex(f"class_{c}", -1, (i, 0)) for i, c in enumerate(labels)])
    store.save(out / f"{name}.feat")
    sidecar = {"labels": labels.tolist(), "num_classes": cache.num_classes, "shots": cache.shots, **(meta or {})}
    (out / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out


def load_cache(out_dir: str | Path, name: str = "cache") -> tuple[FewShotCache, dict]:
    out = Path(out_dir)
    meta = json.loads((out / f"{name}.json").read_text())
    store = FeatureStore.load(out / f"{name}.feat")
    keys = store.matrix().astype(np.float64)
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    return FewShotCache(keys, one_hot(meta["labels"], meta["num_classes"])).check(), meta
