"""Acceptance criteria, each run at its stated tolerance.

Every test prints one PASS/FAIL line (collected again in the terminal
summary).  Criteria 5 and 6 train the desk-scale model and dominate the
runtime of the whole suite.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from conmim import numerics as nx
from conmim.cli import SWEEPS, build_data, probe_accuracy, read_metrics, run_ablate, run_pretrain, sweep_configs
from conmim.config import RunConfig, apply_sets
from conmim.data import AugConfig, augment_pair, mask_count, sample_mask, synth_dataset
from conmim.eval import attention_entropy_variance
from conmim.numerics import Tape
from conmim.numerics.suite import run_suite
from conmim.objectives import POOLS, LossConfig, beit_style_loss, conmim_loss, instance_infonce_loss, toy_loss_grad_check
from conmim.rng import generator
from conmim.trainer import (
    LeakageError,
    ScheduleState,
    TrainConfig,
    check_no_leakage,
    load_checkpoint,
    make_schedule,
    pretrain,
    save_checkpoint,
    schedule_value,
)
from conmim.vit import EncoderPair, ViTConfig, encode, patchify, project_head

DESK = ViTConfig()
LN_K = math.log(DESK.num_patches)
SEEDS = (0, 1, 2)
# locked after probing the random-init encoder on the same data (about 0.25 top-1)
MARGIN = 0.15


# -- shared training runs ------------------------------------------------------


@dataclass
class SeedRun:
    seed: int
    probe: float
    random_probe: float
    seconds: float
    pair: EncoderPair
    val: list


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Full desk-scale pretraining (100 epochs over 8k images) for each seed."""
    out = tmp_path_factory.mktemp("desk")
    runs = []
    for seed in SEEDS:
        cfg = apply_sets(RunConfig(), [f"run.seed={seed}", f"run.out_dir={out / f'seed{seed}'}"])
        t0 = time.perf_counter()
        train, val = build_data(cfg)
        res = run_pretrain(cfg, cfg.run.out_dir, train)
        acc = probe_accuracy(cfg, res.pair, train, val)
        base = probe_accuracy(cfg, EncoderPair.create(cfg.vit, seed), train, val)
        runs.append(SeedRun(seed, acc, base, time.perf_counter() - t0, res.pair, val))
    return runs


@dataclass
class ShortRun:
    min_loss: float
    final_loss: float
    final_rank: float
    probe: float
    seconds: float


@pytest.fixture(scope="session")
def collapse_runs(tmp_path_factory):
    """Masked and unmasked 200-step runs from the same seed and data."""
    out = tmp_path_factory.mktemp("collapse")
    base = apply_sets(RunConfig(), ["run.seed=0", "train.max_steps=200"])
    train, val = build_data(base)
    variants = dict(sweep_configs(base, "table4"))
    runs = {}
    for name in ("patchcontrast_nomask", "conmim"):
        cfg = variants[name]
        t0 = time.perf_counter()
        res = run_pretrain(cfg, out / name, train)
        losses = [m.loss for m in res.history]
        acc = probe_accuracy(cfg, res.pair, train, val)
        runs[name] = ShortRun(
            min(losses), losses[-1], res.history[-1].pos_key_rank_mean, acc, time.perf_counter() - t0
        )
    t0 = time.perf_counter()
    random_probe = probe_accuracy(base, EncoderPair.create(base.vit, base.seed), train, val)
    return runs, random_probe, time.perf_counter() - t0


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_fidelity(report_criterion):
    t0 = time.perf_counter()
    report = run_suite(instances=8, seed=0)
    worst_op = max(report.ops(), key=report.max_error)
    op_err = report.max_error(worst_op)
    loss_err = max(toy_loss_grad_check(seed, pool) for pool in POOLS for seed in range(8))
    seconds = time.perf_counter() - t0
    ok = op_err < 1e-4 and loss_err < 1e-4 and seconds < 120
    detail = f"ops max rel err {op_err:.2e} ({worst_op}), loss max rel err {loss_err:.2e}, {seconds:.1f}s"
    assert report_criterion("criterion 1 gradient fidelity", ok, detail), detail


# -- 2 ---------------------------------------------------------------------------


def test_criterion_2_stop_gradient(report_criterion):
    cfg = ViTConfig(image_side=16, patch_side=4, depth=2, dim=32, heads=2, proj_depth=2)
    recs = synth_dataset(8, side=16)
    aug = AugConfig(image_side=16, patch_side=4)
    pairs = [augment_pair(r, i, aug) for i, r in enumerate(recs)]
    checked = 0
    # every train_step asserts no tape participation internally; run each objective
    for objective in ("conmim", "instance", "beit"):
        tc = TrainConfig(epochs=1, batch_size=4, objective=objective, codebook_size=8)
        res = pretrain(recs, cfg, tc)
        checked += res.state.step
    # explicit gradient check: the loss has zero derivative w.r.t. theta_tilde and keys
    pair = EncoderPair.create(cfg, 0)
    x_full = patchify(np.stack([p.full_view.pixels for p in pairs]), cfg).astype(np.float32)
    x_cor = patchify(np.stack([p.corrupted_view_base.pixels for p in pairs]), cfg).astype(np.float32)
    masks = np.stack([p.mask.flags for p in pairs])
    with nx.no_tape():
        keys = project_head(pair.theta_tilde, encode(pair.theta_tilde, x_full, None, cfg).patches, cfg)
    with Tape() as tape:
        q = project_head(pair.theta, encode(pair.theta, x_cor, masks, cfg).patches, cfg)
        grads = nx.backward_accumulate(conmim_loss(q, keys, masks).loss)
        check_no_leakage(tape, pair, keys)
        slow_zero = all(not np.any(grads[t]) for t in pair.theta_tilde.values())
        key_zero = not np.any(grads[keys])
        fast_nonzero = any(np.any(grads[t]) for t in pair.theta.values())
        # the assertion is live: a momentum parameter marked trainable is caught
        pair.theta_tilde["pos_embed"].requires_grad = True
        try:
            check_no_leakage(tape, pair, keys)
            caught = False
        except LeakageError:
            caught = True
    ok = slow_zero and key_zero and fast_nonzero and caught and checked > 0
    detail = f"{checked} asserted steps, grad(theta_tilde)=0: {slow_zero}, grad(keys)=0: {key_zero}, negative control caught: {caught}"
    assert report_criterion("criterion 2 stop-gradient", ok, detail), detail


# -- 3 ---------------------------------------------------------------------------


def test_criterion_3_loss_anchors(report_criterion):
    errs = {}
    same = np.ones((2, 4, 3))
    for pool in ("per_image", "cross_image"):
        rep = conmim_loss(same, same.copy(), np.ones((2, 4), bool), LossConfig(negative_pool=pool))
        errs[f"conmim[{pool}]"] = abs(rep.value - math.log(rep.pool_size[0]))
    keys = generator(0, "gradcheck").normal(size=(2, 4, 3))
    rep = conmim_loss(np.zeros((2, 4, 3)), keys, np.ones((2, 4), bool), LossConfig(negative_pool="filtered"))
    errs["conmim[filtered]"] = abs(rep.value - math.log(rep.pool_size[0]))
    errs["instance"] = abs(instance_infonce_loss(np.ones((5, 3)), np.ones((5, 3))).value - math.log(5))
    errs["beit"] = abs(beit_style_loss(np.zeros((6, 64)), np.arange(6)).value - math.log(64))
    uniform_ok = max(errs.values()) <= 1e-6
    eye = np.eye(4)[None]
    closed = math.log(1 + 3 * math.exp(-10))
    closed_err = max(
        abs(conmim_loss(eye.copy(), eye, np.ones((1, 4), bool), LossConfig(0.1, pool)).value - closed) for pool in POOLS
    )
    ok = uniform_ok and closed_err <= 1e-9
    detail = f"uniform max err {max(errs.values()):.1e}, orthogonal closed form err {closed_err:.1e}"
    assert report_criterion("criterion 3 loss anchors", ok, detail), detail


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_schedule_endpoints(report_criterion):
    cfg = RunConfig().train
    s = make_schedule(8000, cfg)
    T, tw = s.total_steps, s.warmup_steps

    def at(kind, t):
        return schedule_value(kind, ScheduleState(t, T, tw), cfg)

    checks = {
        "lr(0)=0": at("lr", 0) == 0.0,
        "lr(t_w)=peak": at("lr", tw) == cfg.peak_lr,
        "lr(T)=min": at("lr", T) == cfg.min_lr,
        "alpha(0)=0.996": at("momentum", 0) == 0.996,
        "alpha(T)=1": at("momentum", T) == 1.0,
    }
    ok = all(checks.values())
    detail = ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()) + f" (T={T}, t_w={tw})"
    assert report_criterion("criterion 4 schedule endpoints", ok, detail), detail


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_leakage_collapse(collapse_runs, desk_runs, report_criterion):
    runs, random_probe, _ = collapse_runs
    nomask, masked = runs["patchcontrast_nomask"], runs["conmim"]
    checks = {
        "nomask loss < 0.05 ln K": nomask.min_loss < 0.05 * LN_K,
        "nomask probe within 3 points of random": abs(nomask.probe - random_probe) <= 0.03,
        "masked loss at step 200 > 0.3 ln K": masked.final_loss > 0.3 * LN_K,
        # the masked objective beating random init is the full-run ordering of criterion 6
        "masked beats random (full run)": np.mean([r.probe - r.random_probe for r in desk_runs]) > 0,
    }
    ok = all(checks.values())
    detail = (
        f"nomask min loss {nomask.min_loss:.3f} (< {0.05 * LN_K:.3f}), rank {nomask.final_rank:.2f}, "
        f"probe {nomask.probe:.3f} vs random {random_probe:.3f}; masked loss {masked.final_loss:.3f} "
        f"(> {0.3 * LN_K:.3f}), 200-step probe {masked.probe:.3f}; failed: "
        + (", ".join(k for k, v in checks.items() if not v) or "none")
    )
    assert report_criterion("criterion 5 leakage collapse", ok, detail), detail


def test_criterion_5_runtime(collapse_runs, report_criterion):
    runs, _, base_seconds = collapse_runs
    seconds = sum(r.seconds for r in runs.values()) + base_seconds
    detail = f"{seconds / 60:.1f} min (limit 10)"
    assert report_criterion("criterion 5 runtime", seconds < 600, detail), detail


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_pretraining_helps(desk_runs, report_criterion):
    probe = np.mean([r.probe for r in desk_runs])
    base = np.mean([r.random_probe for r in desk_runs])
    per_seed = ", ".join(f"seed {r.seed}: {r.probe:.3f} vs {r.random_probe:.3f}" for r in desk_runs)
    ok = probe - base >= MARGIN
    detail = f"mean probe {probe:.3f} vs random-init {base:.3f}, margin {probe - base:+.3f} (need {MARGIN:+.2f}); {per_seed}"
    assert report_criterion("criterion 6 pretraining helps", ok, detail), detail


def test_criterion_6_runtime(desk_runs, report_criterion):
    seconds = sum(r.seconds for r in desk_runs)
    detail = f"{seconds / 60:.1f} min for {len(desk_runs)} seeds (limit 30)"
    assert report_criterion("criterion 6 runtime", seconds <= 1800, detail), detail


def test_attention_locality_after_pretraining(desk_runs, report_criterion):
    images = desk_runs[0].val[:64]
    block = DESK.depth - 1
    trained = np.mean([attention_entropy_variance(r.pair, images, block) for r in desk_runs])
    fresh = np.mean([attention_entropy_variance(EncoderPair.create(DESK, r.seed), images, block) for r in desk_runs])
    detail = f"[CLS] attention entropy variance {trained:.4g} pretrained vs {fresh:.4g} random-init"
    assert report_criterion("attention entropy variance", trained > fresh, detail), detail


# -- 7 ---------------------------------------------------------------------------

# the sweeps fix neither data size nor schedule; a reduced desk setting keeps them tractable
SWEEP_SETS = ["data.n_train=2000", "data.n_val=1000", "train.epochs=10", "run.seed=0"]


@pytest.mark.parametrize("sweep", ["table5", "table7"])
def test_criterion_7_controlled_sweeps(sweep, tmp_path, report_criterion):
    cfg = apply_sets(RunConfig(), SWEEP_SETS)
    lines = []
    rows = run_ablate(cfg, sweep, tmp_path, lines.append)
    written = read_metrics(tmp_path / f"ablate_{sweep}.csv")
    names = [n for n, _ in SWEEPS[sweep]]
    shared = all(v.seed == cfg.seed and v.data == cfg.data for _, v in sweep_configs(cfg, sweep))
    accs = {r["variant"]: r["probe_acc"] for r in rows}
    ok = (
        [r["variant"] for r in written] == names
        and all(0.0 <= a <= 1.0 and math.isfinite(a) for a in accs.values())
        and shared
    )
    detail = lines[-1]
    if sweep == "table7":
        soft = accs["conmim"] >= accs["no_momentum"]
        detail += f"; reference >= no_momentum: {'yes' if soft else 'no'} (soft, not asserted)"
    assert report_criterion(f"criterion 7 {sweep} sweep", ok, detail), detail


# -- 8 ---------------------------------------------------------------------------


def test_criterion_8_mask_exactness(report_criterion):
    grid = [(64, 0.6), (64, 0.75), (64, 0.9), (196, 0.75)]
    exact = all(
        sample_mask(k, strategy, r, seed).count == math.ceil(r * k) == mask_count(k, r)
        for k, r in grid
        for strategy in ("random", "block")
        for seed in range(20)
    )
    rng = generator(0, "mask")
    freq = np.zeros(64)
    for _ in range(10_000):
        freq += sample_mask(64, "random", 0.75, rng).flags
    dev = float(np.abs(freq / 10_000 - 0.75).max())
    ok = exact and dev <= 0.03
    detail = f"popcounts exact: {exact}, max per-position frequency deviation {dev:.4f} (limit 0.03)"
    assert report_criterion("criterion 8 mask exactness", ok, detail), detail


# -- 9 ---------------------------------------------------------------------------


def test_criterion_9_determinism_and_persistence(tmp_path, report_criterion):
    sets = ["vit.depth=2", "data.n_train=256", "data.n_val=64", "train.epochs=2", "train.batch_size=32"]
    csvs = []
    for _ in range(2):
        cfg = apply_sets(RunConfig(), sets + [f"run.out_dir={tmp_path / 'shared'}"])
        run_pretrain(cfg, cfg.run.out_dir)
        csvs.append((tmp_path / "shared" / "metrics.csv").read_bytes())
    same_metrics = csvs[0] == csvs[1]
    ck = load_checkpoint(tmp_path / "shared" / "final.ckpt")
    a = save_checkpoint(ck.pair, ck.moments, ck.state, ck.config, tmp_path / "a.ckpt")
    back = load_checkpoint(a)
    b = save_checkpoint(back.pair, back.moments, back.state, back.config, tmp_path / "b.ckpt")
    same_ckpt = a.read_bytes() == b.read_bytes() == (tmp_path / "shared" / "final.ckpt").read_bytes()
    ok = same_metrics and same_ckpt
    detail = f"metrics CSV identical: {same_metrics}, checkpoint roundtrip byte-identical: {same_ckpt}"
    assert report_criterion("criterion 9 determinism", ok, detail), detail


# -- 10 --------------------------------------------------------------------------


def test_criterion_10_corrupted_branch_invariance(report_criterion):
    pair = EncoderPair.create(DESK, 0)
    recs = synth_dataset(8, seed=5)
    x = patchify(np.stack([r.pixels for r in recs]), DESK).astype(np.float32)
    identical = True
    for seed in range(10):
        rng = generator(seed, "mask")
        masks = np.stack([sample_mask(DESK.num_patches, "random", 0.75, rng).flags for _ in recs])
        y = x.copy()
        y[masks] = rng.random(y[masks].shape).astype(np.float32)
        with nx.no_tape():
            a = encode(pair.theta, x, masks, DESK)
            b = encode(pair.theta, y, masks, DESK)
            qa = project_head(pair.theta, a.patches, DESK).data
            qb = project_head(pair.theta, b.patches, DESK).data
        identical &= qa.tobytes() == qb.tobytes() and a.cls.data.tobytes() == b.cls.data.tobytes()
    detail = f"10 mask draws x 8 images, masked pixels replaced: outputs bit-identical {identical}"
    assert report_criterion("criterion 10 corrupted-branch invariance", identical, detail), detail
