import math

import numpy as np
import pytest
import torch

from anatomy_ssl.backbone import BackboneConfig
from anatomy_ssl.checkpoint import MAGIC
from anatomy_ssl.errors import ConfigurationError, NumericalError, PersistenceError
from anatomy_ssl.phantom import PhantomConfig, generate_phantom
from anatomy_ssl.trainer import (
    METRICS_COLUMNS,
    PairSampler,
    TrainConfig,
    init_state,
    load_checkpoint,
    make_schedules,
    pretrain,
    read_metrics,
    save_checkpoint,
    steps_per_epoch,
    train_step,
)

TINY_BB = BackboneConfig(image_size=32, patch=8, dim=16, depth=1, heads=2, dec_dim=16, dec_depth=1, dec_heads=2,
                         num_prototypes=8, head_hidden=32)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, n_slm=3, checkpoint_every=1, seed=3, backbone=TINY_BB)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def images():
    cfg = PhantomConfig(size=32)
    return np.stack([generate_phantom(100 + i, cfg) for i in range(10)])


# ---- schedules ----------------------------------------------------------------------------

def test_peak_lr_formula():
    assert TrainConfig(batch_size=64).peak_lr == pytest.approx(0.000125, rel=1e-15)


def test_schedule_endpoints():
    cfg = TrainConfig(epochs=40, batch_size=64)
    s = make_schedules(cfg, 10)
    n = len(s.lr)
    assert n == 400
    assert s.lr[0] == 0.0
    warm = 10 * 1  # round(40 * 20 / 800) = 1 epoch
    assert s.lr[warm] == pytest.approx(cfg.peak_lr, rel=1e-12)
    assert s.lr.max() == pytest.approx(cfg.peak_lr, rel=1e-12)
    assert s.lr[-1] <= 1e-6 * cfg.peak_lr
    assert np.all(np.diff(s.lr[:warm + 1]) > 0) and np.all(np.diff(s.lr[warm:]) <= 1e-18)
    assert s.lam[0] == 0.99 and s.lam[-1] == 1.0
    assert s.wd[0] == pytest.approx(0.04, abs=1e-15) and s.wd[-1] == pytest.approx(0.4, abs=1e-15)
    tw = 10 * 2  # round(40 * 30 / 800) = 2 epochs
    assert s.tau_t[0] == 0.04
    assert np.all(s.tau_t[tw:] == 0.07)
    assert np.all(np.diff(s.tau_t[:tw + 1]) > 0)
    assert s.at(10**6) == s.at(n - 1)


def test_schedule_errors():
    with pytest.raises(ConfigurationError):
        make_schedules(TrainConfig(), 0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(wd_start=0.5, wd_end=0.1).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0).validate()


def test_steps_per_epoch():
    assert steps_per_epoch(10, 2) == 5
    assert steps_per_epoch(2000, 32) == 63
    assert steps_per_epoch(33, 32) == 1


def test_config_roundtrip():
    cfg = tiny_cfg(beta=3.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---- single steps -------------------------------------------------------------------------

def _first_batch(images, cfg):
    return PairSampler(images, cfg).batch(0, 0)


def test_train_step_determinism(images):
    cfg = tiny_cfg()
    batch = _first_batch(images, cfg)
    a = init_state(cfg, 2)
    b = init_state(cfg, 2)
    for _ in range(2):
        a, pa = train_step(a, batch)
        b, pb = train_step(b, batch)
        assert pa == pb
    for (n1, p1), (n2, p2) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_teacher_is_ema_of_student(images):
    cfg = tiny_cfg()
    state = init_state(cfg, 2)
    state, _ = train_step(state, _first_batch(images, cfg))  # lambda differs from 1 from the second step on
    before = {k: v.clone() for k, v in state.model.teacher.state_dict().items()}
    lam = state.schedules.at(state.step)[3]
    bank_step = state.bank.step
    state, _ = train_step(state, _first_batch(images, cfg))
    assert state.bank.step == bank_step + 1
    student = state.model.student.state_dict()
    for k, v in state.model.teacher.state_dict().items():
        expected = before[k] * lam + student[k] * (1 - lam)
        assert torch.allclose(v, expected, rtol=0, atol=1e-7)


def test_stop_gradient_teacher_and_bank(images):
    cfg = tiny_cfg(lam_start=1.0, lam_end=1.0, momentum=1.0)
    state = init_state(cfg, 2)
    batch = _first_batch(images, cfg)
    state, _ = train_step(state, batch)
    teacher = [p.clone() for p in state.model.teacher_parameters()]
    bank = state.bank.prototypes.copy()
    student = [p.clone() for p in state.model.student.parameters()]
    state, _ = train_step(state, batch)
    assert all(torch.equal(a, b) for a, b in zip(teacher, state.model.teacher_parameters()))
    assert all(p.grad is None for p in state.model.teacher_parameters())
    assert np.array_equal(bank, state.bank.prototypes)
    assert any(not torch.equal(a, b) for a, b in zip(student, state.model.student.parameters()))
    opt_ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert not opt_ids & {id(p) for p in state.model.teacher_parameters()}


def test_weight_decay_groups(images):
    state = init_state(tiny_cfg(), 2)
    decay, no_decay = state.optimizer.param_groups
    assert all(p.ndim >= 2 for p in decay["params"]) and all(p.ndim < 2 for p in no_decay["params"])
    assert no_decay["weight_decay"] == 0.0


def test_nan_loss_aborts_with_diagnostics(images, tmp_path):
    cfg = tiny_cfg()
    state = init_state(cfg, 2)
    batch = _first_batch(images, cfg)
    with torch.no_grad():
        state.model.student.pos_embed.fill_(float("nan"))
    with pytest.raises(NumericalError):
        train_step(state, batch, tmp_path / "diag.json")
    assert (tmp_path / "diag.json").exists()


def test_sampler_cycles_draws(images):
    cfg = tiny_cfg(n_slm=2)
    s = PairSampler(images, cfg)
    a = s.pair(0, 0)
    b = s.pair(0, 2 % cfg.n_slm)
    assert np.array_equal(a[2], b[2])
    assert not np.array_equal(s.pair(0, 1)[2], a[2])
    assert sorted(s.order(4)) == list(range(10))


# ---- pretrain loop ------------------------------------------------------------------------

def test_pretrain_log_and_steps(images, tmp_path):
    cfg = tiny_cfg(epochs=1, batch_size=2)
    res = pretrain(images, cfg, tmp_path)
    lines = res.metrics.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS)
    assert len(lines) == 5 + 1
    m = read_metrics(res.metrics)
    assert list(m["step"]) == [0, 1, 2, 3, 4]
    assert np.allclose(m["l_total"], m["l_stru"] + m["l_cate"] + m["l_recon"], rtol=1e-6)
    assert all(math.isfinite(v) for v in m["l_total"])
    assert res.checkpoint.exists()


def test_pretrain_rejects_small_dataset(images, tmp_path):
    with pytest.raises(ConfigurationError):
        pretrain(images[:3], tiny_cfg(), tmp_path)


def test_two_runs_identical_logs(images, tmp_path):
    cfg = tiny_cfg()
    a = pretrain(images, cfg, tmp_path / "a")
    b = pretrain(images, cfg, tmp_path / "b")
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_resume_matches_uninterrupted(images, tmp_path):
    cfg = tiny_cfg(epochs=3)
    full = pretrain(images, cfg, tmp_path / "full")
    part = pretrain(images, cfg, tmp_path / "part", max_steps=4)
    assert read_metrics(part.metrics)["step"].size == 4
    resumed = pretrain(images, cfg, tmp_path / "part", resume=part.checkpoint)
    assert resumed.metrics.read_bytes() == full.metrics.read_bytes()


def test_checkpoint_roundtrip_bytes(images, tmp_path):
    cfg = tiny_cfg()
    state = init_state(cfg, 3)
    state, _ = train_step(state, _first_batch(images, cfg))
    p1 = save_checkpoint(state, tmp_path / "a.ckpt")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.step == 1 and loaded.bank.step == 1


def test_loaded_state_next_loss_identical(images, tmp_path):
    cfg = tiny_cfg()
    batch = _first_batch(images, cfg)
    state = init_state(cfg, 3)
    state, _ = train_step(state, batch)
    save_checkpoint(state, tmp_path / "s.ckpt")
    _, direct = train_step(state, batch)
    _, reloaded = train_step(load_checkpoint(tmp_path / "s.ckpt"), batch)
    assert direct == reloaded


def test_checkpoint_corruption(images, tmp_path):
    cfg = tiny_cfg()
    path = save_checkpoint(init_state(cfg, 3), tmp_path / "c.ckpt")
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + raw[len(MAGIC):])
    with pytest.raises(PersistenceError, match="magic"):
        load_checkpoint(bad)
    raw[8] = 99
    bad.write_bytes(bytes(raw))
    with pytest.raises(PersistenceError, match="version 99"):
        load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(PersistenceError):
        load_checkpoint(bad)
