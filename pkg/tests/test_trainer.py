import math

import numpy as np
import pytest

from conmim import numerics as nx
from conmim.data import AugConfig, augment_pair, synth_dataset
from conmim.numerics import NumericsError, Tape, Tensor
from conmim.trainer import (
    AdamState,
    BadMagicError,
    LeakageError,
    ScheduleState,
    TrainConfig,
    TruncatedCheckpointError,
    VersionMismatchError,
    adamw_step,
    check_no_leakage,
    decays,
    ema_update,
    load_checkpoint,
    make_schedule,
    pretrain,
    save_checkpoint,
    schedule_value,
    train_step,
)
from conmim.vit import EncoderPair, ViTConfig

SMALL = ViTConfig(image_side=8, patch_side=4, depth=2, dim=16, heads=2, proj_depth=2)
CFG = TrainConfig(epochs=10, batch_size=4, peak_lr=1e-3)


def _pairs(n, cfg=SMALL, seed=0):
    recs = synth_dataset(n, side=cfg.image_side, seed=seed)
    aug = AugConfig(image_side=cfg.image_side, patch_side=cfg.patch_side)
    return [augment_pair(r, 100 + i, aug) for i, r in enumerate(recs)]


def _state(t, total=100, warmup=10):
    return ScheduleState(t, total, warmup)


# -- schedules ---------------------------------------------------------------


def test_lr_endpoints():
    assert schedule_value("lr", _state(0), CFG) == 0.0
    assert schedule_value("lr", _state(10), CFG) == pytest.approx(CFG.peak_lr, abs=1e-15)
    assert schedule_value("lr", _state(100), CFG) == pytest.approx(CFG.min_lr, abs=1e-15)


def test_momentum_endpoints_and_midpoint():
    assert schedule_value("momentum", _state(0), CFG) == pytest.approx(0.996, abs=1e-15)
    assert schedule_value("momentum", _state(100), CFG) == pytest.approx(1.0, abs=1e-15)
    assert schedule_value("momentum", _state(50), CFG) == pytest.approx(0.998, abs=1e-12)


def test_schedules_monotone():
    lrs = [schedule_value("lr", _state(t), CFG) for t in range(101)]
    alphas = [schedule_value("momentum", _state(t), CFG) for t in range(101)]
    assert all(a <= b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert all(a <= b for a, b in zip(alphas, alphas[1:]))


def test_warmup_must_be_below_total():
    with pytest.raises(ValueError):
        schedule_value("lr", ScheduleState(0, 10, 10), CFG)


def test_schedule_state_bounds():
    with pytest.raises(ValueError):
        ScheduleState(11, 10, 1)


def test_make_schedule_ignores_max_steps():
    a = make_schedule(400, CFG)
    b = make_schedule(400, TrainConfig(epochs=10, batch_size=4, peak_lr=1e-3, max_steps=7))
    assert (a.total_steps, a.warmup_steps) == (b.total_steps, b.warmup_steps) == (1000, 100)


@pytest.mark.parametrize(
    "kw", [dict(min_lr=0.0), dict(min_lr=1.0, peak_lr=0.5), dict(momentum=1.0), dict(objective="mae"), dict(epochs=0)]
)
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- EMA ---------------------------------------------------------------------


def _pair_with(theta, slow):
    pair = EncoderPair.create(SMALL, 0)
    for k in pair.theta:
        pair.theta[k].data[...] = theta
        pair.theta_tilde[k].data[...] = slow
    return pair


def test_ema_alpha_one_is_fixed_point():
    pair = EncoderPair.create(SMALL, 0)
    pair.theta["pos_embed"].data[...] += 1.0
    before = {k: t.data.copy() for k, t in pair.theta_tilde.items()}
    ema_update(pair, 1.0)
    assert all((pair.theta_tilde[k].data == before[k]).all() for k in before)


def test_ema_alpha_zero_copies():
    pair = _pair_with(1.5, -2.0)
    ema_update(pair, 0.0)
    assert all((pair.theta_tilde[k].data == 1.5).all() for k in pair.theta)


def test_ema_arithmetic():
    pair = _pair_with(1.0, 0.0)
    ema_update(pair, 0.996)
    for k in pair.theta:
        np.testing.assert_allclose(pair.theta_tilde[k].data, 0.004, rtol=1e-6)
        assert (pair.theta[k].data == 1.0).all()


# -- AdamW -------------------------------------------------------------------


def _scalar(v=2.0):
    return {"x": Tensor(np.array([v]), requires_grad=True)}


def test_adamw_zero_gradient_no_decay():
    p = _scalar()
    cfg = TrainConfig(weight_decay=0.0, grad_clip=None)
    adamw_step(p, {"x": np.zeros(1)}, AdamState.zeros_like(p), 0.1, cfg)
    assert p["x"].data[0] == 2.0


def test_adamw_first_step_moves_by_lr():
    p = _scalar()
    cfg = TrainConfig(weight_decay=0.0, grad_clip=None, adam_eps=0.0)
    adamw_step(p, {"x": np.ones(1)}, AdamState.zeros_like(p), 0.01, cfg)
    assert p["x"].data[0] == pytest.approx(2.0 - 0.01, abs=1e-15)


def test_adamw_decay_only():
    p = _scalar()
    cfg = TrainConfig(weight_decay=0.05, grad_clip=None)
    adamw_step(p, {"x": np.zeros(1)}, AdamState.zeros_like(p), 0.1, cfg)
    assert p["x"].data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.05), abs=1e-15)


def test_adamw_clip_returns_preclip_norm():
    p = {"a": Tensor(np.zeros(2), requires_grad=True)}
    norm = adamw_step(p, {"a": np.array([3.0, 4.0])}, AdamState.zeros_like(p), 0.1, TrainConfig(grad_clip=1.0))
    assert norm == pytest.approx(5.0)


def test_adamw_strict_names_parameter():
    p = _scalar()
    with pytest.raises(NumericsError, match="parameter x"):
        adamw_step(p, {"x": np.array([np.nan])}, AdamState.zeros_like(p), 0.1, TrainConfig(strict=True))


def test_adamw_shape_mismatch():
    p = _scalar()
    with pytest.raises(nx.ShapeError):
        adamw_step(p, {"x": np.zeros(2)}, AdamState.zeros_like(p), 0.1, TrainConfig())


@pytest.mark.parametrize(
    "name,expected",
    [("blocks.0.ln1.g", False), ("blocks.3.ln2.b", False), ("norm.g", False), ("mask_token", False), ("blocks.0.qkv.w", True), ("head.0.w", True)],
)
def test_decay_exclusions(name, expected):
    assert decays(name) is expected


# -- training step -----------------------------------------------------------


def _step_setup(seed=0):
    pair = EncoderPair.create(SMALL, seed)
    return pair, AdamState.zeros_like(pair.theta), ScheduleState(5, 100, 10)


def test_train_step_updates_theta_and_follows_ema():
    pair, moments, state = _step_setup()
    slow_before = {k: t.data.copy() for k, t in pair.theta_tilde.items()}
    theta_before = {k: t.data.copy() for k, t in pair.theta.items()}
    alpha = schedule_value("momentum", state, CFG)
    train_step(pair, _pairs(4), CFG, state, moments)
    assert state.step == 6
    assert any((pair.theta[k].data != theta_before[k]).any() for k in theta_before)
    for k, t in pair.theta_tilde.items():
        expected = np.float32(alpha) * slow_before[k] + np.float32(1 - alpha) * pair.theta[k].data
        np.testing.assert_allclose(t.data, expected, rtol=1e-6, atol=1e-9)


def test_train_step_deterministic():
    reports = []
    for _ in range(2):
        pair, moments, state = _step_setup()
        seq = [train_step(pair, _pairs(4, seed=s), CFG, state, moments) for s in range(3)]
        reports.append([(r.value, r.per_anchor_rank.tobytes()) for r in seq])
        reports.append(b"".join(t.data.tobytes() for t in pair.theta.values()))
    assert reports[0] == reports[2]
    assert reports[1] == reports[3]


def test_step_zero_loss_near_ln_k():
    cfg = ViTConfig()
    pair = EncoderPair.create(cfg, 0)
    rep = train_step(pair, _pairs(16, cfg), CFG, ScheduleState(0, 100, 10), AdamState.zeros_like(pair.theta))
    ln_k = math.log(cfg.num_patches)
    assert 0.5 * ln_k <= rep.value <= 1.5 * ln_k


@pytest.mark.parametrize("objective", ["instance", "beit"])
def test_baseline_objectives_run(objective):
    cfg = TrainConfig(epochs=1, batch_size=4, objective=objective, codebook_size=4)
    res = pretrain(synth_dataset(8, side=8), SMALL, cfg)
    assert res.state.step == 2
    assert all(np.isfinite(m.loss) for m in res.history)


def test_leakage_check_flags_tape_participation():
    pair = EncoderPair.create(SMALL, 0)
    with Tape() as tape:
        check_no_leakage(tape, pair, None)
        pair.theta_tilde["pos_embed"].requires_grad = True
        with pytest.raises(LeakageError, match="pos_embed"):
            check_no_leakage(tape, pair, None)


def test_leakage_check_flags_keys():
    pair = EncoderPair.create(SMALL, 0)
    with Tape() as tape:
        keys = Tensor(np.ones(2), requires_grad=True) * 2.0
        with pytest.raises(LeakageError, match="key features"):
            check_no_leakage(tape, pair, keys)


def test_ema_replay_equivalence():
    recs = synth_dataset(16, side=8)
    cfg = TrainConfig(epochs=2, batch_size=4, peak_lr=1e-3)
    thetas = []
    alphas = []

    def on_step(m, _report):
        thetas.append({k: t.data.astype(np.float64) for k, t in res_holder["pair"].theta.items()})
        alphas.append(m.momentum_alpha)

    res_holder = {"pair": EncoderPair.create(SMALL, cfg.seed)}
    res = pretrain(recs, SMALL, cfg, pair=res_holder["pair"], on_step=on_step)
    replay = {k: t.data.astype(np.float64) for k, t in EncoderPair.create(SMALL, cfg.seed).theta.items()}
    for theta, a in zip(thetas, alphas):
        for k in replay:
            replay[k] = (1 - a) * theta[k] + a * replay[k]
    for k, t in res.pair.theta_tilde.items():
        np.testing.assert_allclose(t.data, replay[k], rtol=1e-6, atol=1e-8)


def test_max_steps_truncates():
    cfg = TrainConfig(epochs=5, batch_size=4, max_steps=3)
    res = pretrain(synth_dataset(16, side=8), SMALL, cfg)
    assert [m.step for m in res.history] == [0, 1, 2]
    assert res.state.total_steps == 20


def test_copy_mode_keeps_twin_equal():
    cfg = TrainConfig(epochs=1, batch_size=4, momentum_mode="copy")
    res = pretrain(synth_dataset(8, side=8), SMALL, cfg)
    assert all((res.pair.theta[k].data == t.data).all() for k, t in res.pair.theta_tilde.items())
    assert all(m.momentum_alpha == 0.0 for m in res.history)


# -- checkpoints -------------------------------------------------------------


def _trained():
    pair, moments, state = _step_setup()
    train_step(pair, _pairs(4), CFG, state, moments)
    return pair, moments, state


def test_checkpoint_roundtrip_bytes(tmp_path):
    pair, moments, state = _trained()
    a = save_checkpoint(pair, moments, state, {"note": "x"}, tmp_path / "a.ckpt")
    ck = load_checkpoint(a)
    b = save_checkpoint(ck.pair, ck.moments, ck.state, ck.config, tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()
    assert ck.state.step == state.step == 6
    assert ck.moments.t == 1
    assert all(ck.pair.theta[k].data.tobytes() == t.data.tobytes() for k, t in pair.theta.items())


def test_checkpoint_bad_magic(tmp_path):
    p = save_checkpoint(*_trained(), {}, tmp_path / "c.ckpt")
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="bad magic"):
        load_checkpoint(p)


def test_checkpoint_version(tmp_path):
    p = save_checkpoint(*_trained(), {}, tmp_path / "c.ckpt")
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = save_checkpoint(*_trained(), {}, tmp_path / "c.ckpt")
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(TruncatedCheckpointError, match="truncated"):
        load_checkpoint(p)
