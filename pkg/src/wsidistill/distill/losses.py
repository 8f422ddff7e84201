"""Loss terms of the multi-view self-distillation objective.

All functions accept batched tensors whose last axis is the distribution
axis; leading axes are averaged over.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import torch

PROB_FLOOR = 1e-12


def temperature_softmax(z: torch.Tensor, tau: float) -> torch.Tensor:
    """softmax(z / tau) along the last axis, stabilised by max-subtraction."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = z / tau
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    ez = torch.exp(z)
    return ez / ez.sum(dim=-1, keepdim=True)


def cross_entropy_H(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """H(a, b) = -sum_i a_i log b_i over the last axis.

    ``a`` is treated as a fixed target (detached); ``b`` is floored at 1e-12
    before the log.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"distribution length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return -(a.detach() * torch.log(b.clamp_min(PROB_FLOOR))).sum(dim=-1)


def _batch_mean(h: torch.Tensor) -> torch.Tensor:
    return h.mean() if h.dim() else h


def main_pairs(teacher_views: Sequence[str], student_views: Sequence[str]) -> list[tuple[str, str]]:
    """All (teacher global, student view) pairs with the diagonal removed."""
    return [(t, s) for t in teacher_views for s in student_views if s != t]


def loss_main(
    teacher_P: Mapping[str, torch.Tensor],
    student_P: Mapping[str, torch.Tensor],
    reduction: str = "mean",
) -> torch.Tensor:
    """Cross-view loss between every teacher global and every other student view.

    ``reduction="mean"`` averages over the pair set; ``"sum"`` gives the plain
    double sum. Views are identified by their mapping keys, so a view paired
    with itself is excluded.
    """
    pairs = main_pairs(list(teacher_P), list(student_P))
    if not pairs:
        raise ValueError("loss_main needs at least one (teacher, student) pair")
    total = sum(_batch_mean(cross_entropy_H(teacher_P[t], student_P[s])) for t, s in pairs)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / len(pairs)
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_color(P_t_ref: torch.Tensor, P_s_color: torch.Tensor) -> torch.Tensor:
    return _batch_mean(cross_entropy_H(P_t_ref, P_s_color))


def loss_mim(P_t_unmasked: torch.Tensor, P_s_masked: torch.Tensor) -> torch.Tensor:
    return _batch_mean(cross_entropy_H(P_t_unmasked, P_s_masked))


def loss_shuffle(
    e: torch.Tensor,
    e_t: torch.Tensor,
    f: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """H(softmax(e), softmax(f(e_t))) with unit temperature.

    ``e`` embeds the original view and is detached; ``e_t`` embeds the
    shuffled view and goes through the projector ``f``.
    """
    projected = f(e_t)
    if projected.shape[-1] != e.shape[-1]:
        raise ValueError(f"projector output dim {projected.shape[-1]} != embedding dim {e.shape[-1]}")
    target = temperature_softmax(e.detach(), 1.0)
    return _batch_mean(cross_entropy_H(target, temperature_softmax(projected, 1.0)))


LOSS_NAMES = ("main", "color", "mim", "shuffle")


def loss_total(parts: Sequence[torch.Tensor | float], weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)):
    """Weighted sum of the four parts; zero-weight terms are dropped entirely."""
    if len(parts) != len(weights):
        raise ValueError("parts and weights differ in length")
    total = 0.0
    for part, w in zip(parts, weights):
        if w != 0 and part is not None:
            total = total + w * part
    return total
