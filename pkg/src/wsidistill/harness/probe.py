"""Linear probe on frozen features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..config import ProbeConfig
from ..metrics import MetricError, accuracy, roc_auc


@dataclass
class LogisticModel:
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    mean: np.ndarray
    scale: np.ndarray
    epochs_run: int = 0

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits = self.decision_function(x)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.decision_function(x).argmax(axis=1)


def fit_logistic(x: np.ndarray, y: np.ndarray, cfg: ProbeConfig, x_val: np.ndarray | None = None,
                 y_val: np.ndarray | None = None, num_classes: int | None = None) -> LogisticModel:
    """Full-batch multinomial logistic regression with Adam and early stopping.

    Features are standardised with training statistics. When a validation set
    is given, the parameters with the lowest validation loss are kept and
    training stops after ``cfg.patience`` epochs without improvement.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    c = num_classes or int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise MetricError("linear probe needs at least two classes in the training split")
    mean = x.mean(axis=0)
    scale = x.std(axis=0) + 1e-8
    xt = torch.from_numpy((x - mean) / scale)
    yt = torch.from_numpy(y)
    gen = torch.Generator().manual_seed(cfg.seed)
    w = (torch.randn(x.shape[1], c, generator=gen, dtype=torch.float64) * 0.01).requires_grad_()
    b = torch.zeros(c, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=cfg.lr)
    has_val = x_val is not None and len(x_val) > 0
    if has_val:
        xv = torch.from_numpy((np.asarray(x_val, dtype=np.float64) - mean) / scale)
        yv = torch.from_numpy(np.asarray(y_val, dtype=np.int64))
    best = (float("inf"), w.detach().clone(), b.detach().clone(), 0)
    stale = 0
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        loss = F.cross_entropy(xt @ w + b, yt) + cfg.l2 * (w * w).sum()
        loss.backward()
        opt.step()
        if has_val:
            with torch.no_grad():
                v = float(F.cross_entropy(xv @ w + b, yv))
            if v < best[0] - 1e-12:
                best, stale = (v, w.detach().clone(), b.detach().clone(), epoch + 1), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if has_val:
        _, wf, bf, ran = best
    else:
        wf, bf, ran = w.detach(), b.detach(), cfg.epochs
    return LogisticModel(wf.numpy().copy(), bf.numpy().copy(), mean, scale, ran)


def grouped_split(groups: list[str], labels: dict[str, int], val_fraction: float, test_fraction: float,
                  seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices of train/val/test with every group (slide) in exactly one
    split, stratified by the group label."""
    rng = np.random.default_rng(seed)
    unique = sorted(set(groups))
    assign: dict[str, str] = {}
    for cls in sorted({labels[g] for g in unique}):
        members = [g for g in unique if labels[g] == cls]
        members = [members[i] for i in rng.permutation(len(members))]
        n_test = max(1, int(round(test_fraction * len(members))))
        n_val = int(round(val_fraction * len(members)))
        for i, g in enumerate(members):
            assign[g] = "test" if i < n_test else "val" if i < n_test + n_val else "train"
    tags = np.array([assign[g] for g in groups])
    return tuple(np.nonzero(tags == t)[0] for t in ("train", "val", "test"))


def linear_probe(features: np.ndarray, groups: list[str], labels: dict[str, int], cfg: ProbeConfig,
                 split: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None) -> dict:
    """Train on frozen features, report test ACC/AUC.

    Each row inherits the label of its group (slide); splits never share a group.
    """
    y = np.array([labels[g] for g in groups])
    if len(np.unique(y)) < 2:
        raise MetricError("degenerate single-class dataset")
    tr, va, te = split if split is not None else grouped_split(
        groups, labels, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    c = int(y.max()) + 1
    model = fit_logistic(features[tr], y[tr], cfg, features[va], y[va], num_classes=c)
    proba = model.predict_proba(features[te])
    result = {"acc": accuracy(proba.argmax(axis=1), y[te]), "n_train": len(tr), "n_test": len(te)}
    try:
        result["auc"] = roc_auc(proba if c > 2 else proba[:, 1], y[te])
    except MetricError:
        result["auc"] = float("nan")
    return result


def stratified_subset(indices: np.ndarray, groups: list[str], labels: dict[str, int], fraction: float,
                      seed: int) -> np.ndarray:
    """Keep ``fraction`` of the groups of each class (at least one), with all their rows."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"data fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return indices
    rng = np.random.default_rng([seed, int(round(fraction * 1e6))])
    present = sorted({groups[i] for i in indices})
    keep: set[str] = set()
    for cls in sorted({labels[g] for g in present}):
        members = [g for g in present if labels[g] == cls]
        n = max(1, int(round(fraction * len(members))))
        keep.update(members[i] for i in rng.permutation(len(members))[:n])
    return np.array([i for i in indices if groups[i] in keep], dtype=np.int64)


def probe_fractions(features: np.ndarray, groups: list[str], labels: dict[str, int], cfg: ProbeConfig,
                    fractions: list[float]) -> list[tuple[float, dict]]:
    """Linear probe trained on stratified subsets of one fixed training split."""
    tr, va, te = grouped_split(groups, labels, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    return [(f, linear_probe(features, groups, labels, cfg, (stratified_subset(tr, groups, labels, f, cfg.seed), va, te)))
            for f in fractions]
