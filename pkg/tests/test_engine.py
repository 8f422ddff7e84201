import math

import numpy as np
import pytest
import torch

from wsidistill.config import ConfigError
from wsidistill.distill.checkpoint import CheckpointError, decode_container, encode_container, load_checkpoint, save_checkpoint
from wsidistill.distill.engine import (
    DivergenceError,
    compute_losses,
    ema_update,
    ema_update_,
    init_train_state,
    make_optimizer,
    replay_teacher,
    run_training,
    train_step,
)
from wsidistill.distill.schedules import lambda_schedule, lr_schedule, teacher_temp_schedule
from wsidistill.views import ViewStream

from conftest import tiny_config, with_train


def stream_for(cfg, manifest):
    return ViewStream(manifest, cfg.data, cfg.views, cfg.model.num_patches, cfg.train.batch_size, cfg.train.seed)


# ----- schedules -------------------------------------------------------------

def test_lambda_endpoints():
    assert lambda_schedule(0, 100, 0.996) == 0.996
    assert lambda_schedule(100, 100, 0.996) == 1.0


def test_lambda_monotone():
    vals = [lambda_schedule(t, 37, 0.99) for t in range(38)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_lambda_rejects_out_of_range():
    with pytest.raises(ValueError):
        lambda_schedule(11, 10)


def test_lr_warmup_then_nonincreasing():
    T, w = 50, 10
    vals = [lr_schedule(t, T, w, 1e-3, 1e-6) for t in range(T + 1)]
    assert vals[0] == 0.0
    assert vals[5] == pytest.approx(5e-4)
    assert vals[w] == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(vals[w:], vals[w + 1:]))
    assert vals[T] == pytest.approx(1e-6)


def test_teacher_temperature_warmup():
    assert teacher_temp_schedule(0, 10, 0.04, 0.07) == 0.04
    assert teacher_temp_schedule(5, 10, 0.04, 0.07) == pytest.approx(0.055)
    assert teacher_temp_schedule(10, 10, 0.04, 0.07) == 0.07
    assert teacher_temp_schedule(3, 0, 0.04, 0.07) == 0.07


# ----- EMA -------------------------------------------------------------------

def test_ema_scalar_recursion_bit_exact():
    rng = np.random.default_rng(0)
    T = 100
    teacher = torch.tensor([0.25], dtype=torch.float64)
    expected = 0.25
    for t in range(T):
        s = float(rng.normal())
        lam = lambda_schedule(t, T, 0.996)
        ema_update_([teacher], [torch.tensor([s], dtype=torch.float64)], lam)
        expected = lam * expected + (1.0 - lam) * s
        assert teacher.item() == expected


def test_ema_rejects_bad_momentum():
    with pytest.raises(ValueError):
        ema_update_([torch.zeros(1)], [torch.zeros(1)], 1.5)


def test_ema_lambda_one_freezes_teacher(cfg):
    state = init_train_state(cfg, 1)
    with torch.no_grad():
        for p in state.pair.student.parameters():
            p.add_(1.0)
    before = [p.clone() for p in state.pair.teacher.parameters()]
    ema_update(state.pair, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(before, state.pair.teacher.parameters()))
    ema_update(state.pair, 0.0)
    t_params = dict(state.pair.teacher.named_parameters())
    for name, s, _ in state.pair.shared_parameters():
        assert torch.equal(t_params[name], s)


# ----- training ----------------------------------------------------------------

def test_teacher_has_no_gradient_state(cfg, tiny_manifest):
    state = init_train_state(cfg, 2)
    run_training(state, stream_for(cfg, tiny_manifest), steps=2)
    for p in state.pair.teacher.parameters():
        assert not p.requires_grad
        assert p.grad is None


def test_teacher_replay_matches(cfg, tiny_manifest):
    stream = stream_for(cfg, tiny_manifest)
    state = init_train_state(cfg, stream.steps_per_epoch)
    initial = [t.detach().clone() for _, _, t in state.pair.shared_parameters()]
    trajectory, lambdas = [], []

    def record(report):
        trajectory.append([s.detach().clone() for _, s, _ in state.pair.shared_parameters()])
        lambdas.append(report.lam)

    run_training(state, stream, on_step=record)
    replayed = replay_teacher(initial, trajectory, lambdas)
    final = [t for _, _, t in state.pair.shared_parameters()]
    assert len(trajectory) == state.schedule.total_steps
    for a, b in zip(replayed, final):
        assert torch.max(torch.abs(a - b)).item() <= 1e-12


def test_train_step_reports_all_parts(cfg, tiny_manifest):
    stream = stream_for(cfg, tiny_manifest)
    state = init_train_state(cfg, stream.steps_per_epoch)
    report = train_step(state.pair, stream.batch(0), cfg.train, state.schedule, state.optimizer)
    rec = report.record()
    for key in ("step", "lr", "lambda", "loss_main", "loss_color", "loss_mim", "loss_shuffle", "loss_total"):
        assert key in rec and math.isfinite(rec[key])
    assert rec["loss_total"] == pytest.approx(sum(rec[f"loss_{k}"] for k in ("main", "color", "mim", "shuffle")))
    assert state.schedule.step == 1


def test_disabled_views_give_no_parts(cfg, tiny_manifest):
    from dataclasses import replace

    cfg2 = replace(cfg, views=replace(cfg.views, color_view=False, mim_view=False, shuffle_view=False, multiscale=False))
    stream = stream_for(cfg2, tiny_manifest)
    state = init_train_state(cfg2, stream.steps_per_epoch)
    parts, t_logits = compute_losses(state.pair, stream.batch(0), cfg2.train, 0.04, None)
    assert parts["color"] is None and parts["mim"] is None and parts["shuffle"] is None
    assert t_logits.shape[0] == 2  # two globals without the coarse view


def test_divergence_aborts_before_update(cfg, tiny_manifest):
    stream = stream_for(cfg, tiny_manifest)
    state = init_train_state(cfg, stream.steps_per_epoch)
    with torch.no_grad():
        state.pair.student.head.last.fill_(float("nan"))
    student_before = [p.clone() for p in state.pair.student.parameters()]
    teacher_before = [p.clone() for p in state.pair.teacher.parameters()]
    with pytest.raises(DivergenceError) as info:
        train_step(state.pair, stream.batch(0), cfg.train, state.schedule, state.optimizer)
    assert info.value.term == "main"
    assert state.schedule.step == 0
    for a, b in zip(student_before, state.pair.student.parameters()):
        assert torch.equal(a, b) or (torch.isnan(a).all() and torch.isnan(b).all())
    for a, b in zip(teacher_before, state.pair.teacher.parameters()):
        assert torch.equal(a, b)


def test_optimizer_groups_exclude_norms_and_tokens(cfg):
    state = init_train_state(cfg, 1)
    decay, no_decay = state.optimizer.param_groups
    assert decay["weight_decay"] == cfg.train.weight_decay and no_decay["weight_decay"] == 0.0
    no_decay_ids = {id(p) for p in no_decay["params"]}
    names = {n for n, p in state.pair.student.named_parameters() if id(p) in no_decay_ids}
    assert "encoder.cls_token" in names and "encoder.pos_embed" in names and "encoder.mask_token" in names
    assert all(p.ndim >= 2 for p in decay["params"])


# ----- checkpoints ---------------------------------------------------------------

def test_container_roundtrip_and_checksum():
    blocks = [("a", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b", np.array([1, 2], dtype=np.int64))]
    data = encode_container(7, "0" * 64, blocks)
    step, h, out = decode_container(data)
    assert step == 7 and h == "0" * 64
    assert np.array_equal(out["a"], blocks[0][1]) and out["a"].dtype == np.float32
    corrupt = bytearray(data)
    corrupt[40] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode_container(bytes(corrupt))
    with pytest.raises(CheckpointError):
        decode_container(data[:20])


def test_checkpoint_hash_mismatch(cfg, tmp_path):
    state = init_train_state(cfg, 1)
    path = save_checkpoint(state, tmp_path / "c.ckpt")
    other = with_train(cfg, base_lr=1.0)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, expected=other)


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_resume_is_bit_identical(tiny_corpus, tiny_manifest, tmp_path, dtype):
    cfg = tiny_config(tiny_corpus, dtype=dtype, epochs=3)
    stream = stream_for(cfg, tiny_manifest)
    straight = init_train_state(cfg, stream.steps_per_epoch)
    run_training(straight, stream)

    first = init_train_state(cfg, stream.steps_per_epoch)
    run_training(first, stream, steps=3)
    path = save_checkpoint(first, tmp_path / "mid.ckpt")
    resumed = load_checkpoint(path, expected=cfg)
    run_training(resumed, stream)

    assert resumed.schedule.step == straight.schedule.step
    for (n, a), (_, b) in zip(straight.pair.student.named_parameters(), resumed.pair.student.named_parameters()):
        assert torch.equal(a, b), n
    for a, b in zip(straight.pair.teacher.parameters(), resumed.pair.teacher.parameters()):
        assert torch.equal(a, b)
    assert torch.equal(straight.schedule.teacher_center, resumed.schedule.teacher_center)


def test_config_validation():
    from wsidistill.config import TrainConfig

    with pytest.raises(ConfigError):
        TrainConfig(tau_s=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lambda0=1.5).validate()
