"""Per-step schedules: EMA momentum, learning rate, teacher temperature."""
from __future__ import annotations

import math


def lambda_schedule(t: int, T: int, lambda0: float = 0.996) -> float:
    """EMA momentum rising from ``lambda0`` at t=0 to 1 at t=T along a half cosine."""
    if T <= 0:
        raise ValueError("total steps T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return 1.0 - (1.0 - lambda0) * (math.cos(math.pi * t / T) + 1.0) / 2.0


def lr_schedule(t: int, T: int, warmup: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then cosine decay to ``min_lr`` at T."""
    if T <= 0:
        raise ValueError("total steps T must be positive")
    if warmup > 0 and t < warmup:
        return base_lr * t / warmup
    span = max(T - warmup, 1)
    progress = min(max(t - warmup, 0) / span, 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def teacher_temp_schedule(t: int, warmup: int, start: float, final: float) -> float:
    if warmup <= 0 or t >= warmup:
        return final
    return start + (final - start) * t / warmup
