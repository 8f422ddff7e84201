"""Train step, EMA teacher update and the trainer driving them."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch

from ..backbone import ModelPair, init_pair
from ..config import Config, TrainConfig
from ..views import ViewBatch, ViewStream
from .losses import (
    LOSS_NAMES,
    loss_color,
    loss_main,
    loss_mim,
    loss_shuffle,
    loss_total,
    temperature_softmax,
)
from .schedules import lambda_schedule, lr_schedule, teacher_temp_schedule

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class DivergenceError(FloatingPointError):
    """A loss term became non-finite; the step was aborted before any update."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term


@dataclass
class ScheduleState:
    step: int
    total_steps: int
    warmup_steps: int
    current_lr: float = 0.0
    current_lambda: float = 0.0
    current_tau_t: float = 0.0
    teacher_center: torch.Tensor | None = None


@dataclass
class StepReport:
    step: int
    lr: float
    lam: float
    tau_t: float
    parts: dict[str, float]
    total: float
    grad_norm: float
    teacher_entropy: float = 0.0

    def record(self) -> dict:
        return {"step": self.step, "lr": self.lr, "lambda": self.lam, "tau_t": self.tau_t,
                **{f"loss_{k}": v for k, v in self.parts.items()}, "loss_total": self.total,
                "grad_norm": self.grad_norm, "teacher_entropy": self.teacher_entropy}


def ema_update_(teacher: Iterable[torch.Tensor], student: Iterable[torch.Tensor], lam: float) -> None:
    """In place: t <- lam * t + (1 - lam) * s for every (t, s) pair."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA momentum {lam} outside [0, 1]")
    with torch.no_grad():
        for t, s in zip(teacher, student, strict=True):
            if s.shape != t.shape:
                raise ValueError(f"shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
            t.copy_(lam * t + (1.0 - lam) * s)


def ema_update(pair: ModelPair, lam: float) -> None:
    """EMA step of the teacher's encoder and head towards the student."""
    shared = list(pair.shared_parameters())
    ema_update_([t for _, _, t in shared], [s for _, s, _ in shared], lam)


def make_optimizer(pair: ModelPair, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in pair.student.named_parameters():
        if p.ndim < 2 or "token" in name or "pos_embed" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.base_lr, foreach=False)


def compute_losses(pair: ModelPair, batch: ViewBatch, cfg: TrainConfig, tau_t: float,
                   center: torch.Tensor | None) -> tuple[dict[str, torch.Tensor | None], torch.Tensor]:
    """Forward both networks over a batch of view sets.

    Returns the four loss parts (None for disabled views) and the raw teacher
    logits of the global views, stacked (G, B, K), for the center update.
    """
    student, teacher = pair.student, pair.teacher
    batch = batch.to(next(student.parameters()).dtype)
    n_glob, b = len(batch.globals), batch.size
    g_names = [f"g{i + 1}" for i in range(n_glob)]

    with torch.no_grad():
        t_emb = teacher.encoder(torch.cat(batch.globals))
        t_logits = teacher.head(t_emb)
        centered = t_logits - center if center is not None else t_logits
        t_prob = temperature_softmax(centered, tau_t).split(b)
    teacher_P = dict(zip(g_names, t_prob))

    # all global-size student views share one pass; the masked copy of g1 rides along
    g_inputs = list(batch.globals)
    g_masks = [torch.zeros_like(batch.mask)] * n_glob if batch.mask is not None else None
    if batch.mask is not None:
        g_inputs.append(batch.globals[0])
        g_masks.append(batch.mask)
    s_emb_g = student.encoder(torch.cat(g_inputs), torch.cat(g_masks) if g_masks else None)
    s_prob_g = temperature_softmax(student.head(s_emb_g), cfg.tau_s).split(b)
    student_P = dict(zip(g_names, s_prob_g[:n_glob]))
    masked_P = s_prob_g[n_glob] if batch.mask is not None else None

    l_inputs, l_names = list(batch.locals), [f"l{i}" for i in range(len(batch.locals))]
    if batch.color is not None:
        l_inputs.append(batch.color)
        l_names.append("color")
    if batch.shuffle is not None:
        l_inputs.append(batch.shuffle)
        l_names.append("shuffle")
    s_emb_l = student.encoder(torch.cat(l_inputs))
    s_prob_l = temperature_softmax(student.head(s_emb_l), cfg.tau_s).split(b)
    student_P.update(zip(l_names, s_prob_l))
    if masked_P is not None and cfg.masked_in_main:
        student_P["masked"] = masked_P

    parts: dict[str, torch.Tensor | None] = dict.fromkeys(LOSS_NAMES)
    parts["main"] = loss_main(teacher_P, student_P, reduction=cfg.main_reduction)
    if batch.color is not None:
        parts["color"] = loss_color(teacher_P["g1"], student_P["color"])
    if masked_P is not None:
        parts["mim"] = loss_mim(teacher_P["g1"], masked_P)
    if batch.shuffle is not None:
        e = t_emb[:b]
        e_shuffled = s_emb_l[l_names.index("shuffle") * b:(l_names.index("shuffle") + 1) * b]
        parts["shuffle"] = loss_shuffle(e, e_shuffled, student.projector)
    return parts, t_logits.view(n_glob, b, -1)


def train_step(pair: ModelPair, batch: ViewBatch, cfg: TrainConfig, state: ScheduleState,
               optimizer: torch.optim.Optimizer) -> StepReport:
    """One optimisation step of the student followed by the EMA teacher update."""
    t = state.step
    lr = lr_schedule(t, state.total_steps, state.warmup_steps, cfg.base_lr, cfg.min_lr)
    lam = lambda_schedule(min(t, state.total_steps), state.total_steps, cfg.lambda0)
    tau_t = teacher_temp_schedule(t, state.warmup_steps, cfg.tau_t_start, cfg.tau_t)

    pair.student.train()
    center = state.teacher_center if cfg.centering else None
    parts, t_logits = compute_losses(pair, batch, cfg, tau_t, center)
    for name, value in parts.items():
        if value is not None and not torch.isfinite(value):
            raise DivergenceError(name, value.detach().item())
    total = loss_total([parts[k] for k in LOSS_NAMES], cfg.loss_weights)

    grad_norm = 0.0
    optimizer.zero_grad(set_to_none=True)
    if isinstance(total, torch.Tensor) and total.requires_grad:
        total.backward()
        params = [p for p in pair.student.parameters() if p.grad is not None]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip_grad))
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
    ema_update(pair, lam)

    with torch.no_grad():
        p = temperature_softmax(t_logits - center if center is not None else t_logits, tau_t)
        entropy = float(-(p * p.clamp_min(1e-12).log()).sum(-1).mean())
        batch_center = t_logits.reshape(-1, t_logits.shape[-1]).mean(dim=0)
        m = cfg.center_momentum
        state.teacher_center = state.teacher_center * m + batch_center * (1 - m)
    state.current_lr, state.current_lambda, state.current_tau_t = lr, lam, tau_t
    state.step += 1
    return StepReport(
        step=t, lr=lr, lam=lam, tau_t=tau_t,
        parts={k: (0.0 if v is None else v.detach().item()) for k, v in parts.items()},
        total=float(total.detach()) if isinstance(total, torch.Tensor) else float(total), grad_norm=grad_norm,
        teacher_entropy=entropy,
    )


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    config: Config
    pair: ModelPair
    optimizer: torch.optim.Optimizer
    schedule: ScheduleState
    history: list[dict] = field(default_factory=list)


def init_train_state(cfg: Config, steps_per_epoch: int) -> TrainState:
    dtype = DTYPES[cfg.train.dtype]
    pair = init_pair(cfg.model, cfg.train.seed, dtype)
    optimizer = make_optimizer(pair, cfg.train)
    schedule = ScheduleState(
        step=0,
        total_steps=max(cfg.train.epochs * steps_per_epoch, 1),
        warmup_steps=cfg.train.warmup_epochs * steps_per_epoch,
        teacher_center=torch.zeros(cfg.model.out_dim, dtype=dtype),
    )
    return TrainState(cfg, pair, optimizer, schedule)


def run_training(state: TrainState, stream: ViewStream, steps: int | None = None,
                 on_step: Callable[[StepReport], None] | None = None) -> list[StepReport]:
    """Advance ``state`` by ``steps`` steps (default: to the end of the schedule)."""
    end = state.schedule.total_steps if steps is None else min(state.schedule.step + steps,
                                                               state.schedule.total_steps)
    reports = []
    while state.schedule.step < end:
        batch = stream.batch(state.schedule.step)
        report = train_step(state.pair, batch, state.config.train, state.schedule, state.optimizer)
        reports.append(report)
        if on_step is not None:
            on_step(report)
        if not math.isfinite(report.total):
            raise DivergenceError("total", report.total)
    return reports


def replay_teacher(initial: Iterable[torch.Tensor], students: Iterable[Iterable[torch.Tensor]],
                   lambdas: Iterable[float]) -> list[torch.Tensor]:
    """Recompute teacher parameters from a recorded student trajectory.

    ``students[k]`` are the student parameters right after optimizer step k
    and ``lambdas[k]`` the momentum used at that step.
    """
    teacher = [p.clone() for p in initial]
    for params, lam in zip(students, lambdas):
        teacher = [lam * t + (1.0 - lam) * s for t, s in zip(teacher, params)]
    return teacher
