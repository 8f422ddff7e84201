"""Slide-level classification from bags of frozen patch features.

The aggregator interface is ``bag features (n, D) -> class logits (C,)``;
gated attention pooling is the built-in baseline, other pooling schemes can
be passed to :func:`attention_mil` through ``make_aggregator``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import ProbeConfig
from ..metrics import MetricError, accuracy, roc_auc
from .probe import grouped_split


class Aggregator(Protocol):
    def __call__(self, bag: torch.Tensor) -> torch.Tensor: ...


@dataclass
class BagDataset:
    bags: list[np.ndarray]  # row indices into the feature matrix, one array per slide
    bag_labels: np.ndarray
    bag_ids: list[str]

    def __post_init__(self):
        if len(self.bags) != len(self.bag_labels):
            raise MetricError("one label per bag is required")
        for sid, bag in zip(self.bag_ids, self.bags):
            if len(bag) == 0:
                raise MetricError(f"bag {sid!r} is empty")

    def check(self, n_rows: int) -> "BagDataset":
        for sid, bag in zip(self.bag_ids, self.bags):
            if np.any(bag < 0) or np.any(bag >= n_rows):
                raise MetricError(f"bag {sid!r} indexes rows outside [0, {n_rows})")
        return self

    @classmethod
    def from_groups(cls, groups: list[str], labels: dict[str, int]) -> "BagDataset":
        """One bag per distinct group, in first-appearance order."""
        order: dict[str, list[int]] = {}
        for i, g in enumerate(groups):
            order.setdefault(g, []).append(i)
        ids = list(order)
        return cls([np.array(order[g]) for g in ids], np.array([labels[g] for g in ids]), ids)


class GatedAttentionMIL(nn.Module):
    """a_i ~ exp(w . (tanh(V h_i) * sigmoid(U h_i))), bag = sum_i a_i h_i, then a linear classifier."""

    def __init__(self, dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.V = nn.Linear(dim, hidden)
        self.U = nn.Linear(dim, hidden)
        self.w = nn.Linear(hidden, 1, bias=False)
        self.classifier = nn.Linear(dim, num_classes)

    def attention(self, bag: torch.Tensor) -> torch.Tensor:
        if bag.shape[0] == 0:
            raise MetricError("empty bag")
        scores = self.w(torch.tanh(self.V(bag)) * torch.sigmoid(self.U(bag))).squeeze(-1)
        return torch.softmax(scores, dim=0)

    def pool(self, bag: torch.Tensor) -> torch.Tensor:
        return self.attention(bag) @ bag

    def forward(self, bag: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.pool(bag))


def attention_mil(features: np.ndarray, bags: BagDataset, cfg: ProbeConfig, hidden: int = 64,
                  split: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
                  make_aggregator: Callable[[int, int], nn.Module] | None = None) -> dict:
    """Train a bag classifier on frozen features and report test ACC/AUC over bags.

    ``split`` holds bag indices (train, val, test); by default bags are split
    stratified by label. The parameters with the lowest validation loss are kept.
    """
    bags.check(len(features))
    y = np.asarray(bags.bag_labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise MetricError("degenerate single-class dataset")
    c = int(y.max()) + 1
    if split is None:
        labels = dict(zip(bags.bag_ids, y.tolist()))
        split = grouped_split(bags.bag_ids, labels, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    tr, va, te = split

    x = np.asarray(features, dtype=np.float64)
    train_rows = x[np.concatenate([bags.bags[i] for i in tr])]
    mean, scale = train_rows.mean(0), train_rows.std(0) + 1e-8
    xt = torch.from_numpy((x - mean) / scale)
    bag_x = [xt[torch.from_numpy(np.asarray(b))] for b in bags.bags]
    yt = torch.from_numpy(y)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = (make_aggregator or (lambda d, k: GatedAttentionMIL(d, hidden, k)))(x.shape[1], c).double()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.l2)

    def loss_on(idx) -> torch.Tensor:
        logits = torch.stack([model(bag_x[i]) for i in idx])
        return F.cross_entropy(logits, yt[torch.as_tensor(np.asarray(idx), dtype=torch.long)])

    best_loss, best_state, stale = float("inf"), None, 0
    for _ in range(cfg.epochs):
        opt.zero_grad()
        loss_on(tr).backward()
        opt.step()
        if len(va):
            with torch.no_grad():
                v = float(loss_on(va))
            if v < best_loss - 1e-12:
                best_loss, stale = v, 0
                best_state = {k: t.clone() for k, t in model.state_dict().items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)

    with torch.no_grad():
        proba = torch.stack([torch.softmax(model(bag_x[i]), -1) for i in te]).numpy()
    result = {"acc": accuracy(proba.argmax(1), y[te]), "n_train": len(tr), "n_test": len(te)}
    try:
        result["auc"] = roc_auc(proba if c > 2 else proba[:, 1], y[te])
    except MetricError:
        result["auc"] = float("nan")
    return result
