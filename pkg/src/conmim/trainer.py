"""Pretraining loop: schedules, AdamW, momentum update, checkpoints."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import AugConfig, AugPair, ImageRecord, augment_pair, stack_pixels
from .numerics import NumericsError, Tape, Tensor
from .objectives import (
    LossConfig,
    LossReport,
    TokenizerCodebook,
    beit_style_loss,
    conmim_loss,
    fit_codebook,
    instance_infonce_loss,
)
from .rng import derive_seed, generator
from .vit import EncoderPair, Params, ViTConfig, encode, patchify, project_head

OBJECTIVES = ("conmim", "instance", "beit")


class LeakageError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    peak_lr: float = 1.5e-3  # reference run used 5e-4 at batch 2048
    min_lr: float = 1e-5
    warmup_epochs: float | None = None  # None -> 10% of epochs (reference: 10 of 300/800)
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float | None = 3.0
    momentum: float = 0.996
    # "ema": slow twin; "copy": twin reset to theta every step (no progress-rate asymmetry)
    momentum_mode: str = "ema"
    mask_ratio: float = 0.75
    mask_strategy: str = "random"
    objective: str = "conmim"
    codebook_size: int = 64
    max_steps: int | None = None
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        if not 0 < self.min_lr <= self.peak_lr:
            raise ValueError(f"need 0 < min_lr <= peak_lr, got {self.min_lr} and {self.peak_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"initial momentum must be in [0, 1), got {self.momentum}")
        if self.momentum_mode not in ("ema", "copy"):
            raise ValueError(f"unknown momentum_mode {self.momentum_mode!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def warmup(self) -> float:
        return self.epochs * 0.1 if self.warmup_epochs is None else self.warmup_epochs


@dataclass
class ScheduleState:
    step: int = 0
    total_steps: int = 1
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} outside [0, {self.total_steps}]")


def make_schedule(n_examples: int, cfg: TrainConfig) -> ScheduleState:
    per_epoch = max(1, n_examples // cfg.batch_size)
    # max_steps truncates a run; it never rescales the schedule
    return ScheduleState(0, per_epoch * cfg.epochs, int(round(cfg.warmup * per_epoch)))


def lr_at(t: int, total: int, warmup: int, peak: float, floor: float) -> float:
    if warmup >= total:
        raise ValueError(f"warmup steps {warmup} must be below total steps {total}")
    if t < warmup:
        return peak * t / warmup
    w = (1.0 + math.cos(math.pi * (t - warmup) / (total - warmup))) / 2.0
    # weighted form so both endpoints come out bit-exact
    return w * peak + (1.0 - w) * floor


def momentum_at(t: int, total: int, initial: float) -> float:
    return 1.0 - (1.0 - initial) * (1.0 + math.cos(math.pi * t / total)) / 2.0


def schedule_value(kind: str, state: ScheduleState, cfg: TrainConfig) -> float:
    if state.warmup_steps >= state.total_steps:
        raise ValueError(f"warmup steps {state.warmup_steps} must be below total steps {state.total_steps}")
    if kind == "lr":
        return lr_at(state.step, state.total_steps, state.warmup_steps, cfg.peak_lr, cfg.min_lr)
    if kind == "momentum":
        return momentum_at(state.step, state.total_steps, cfg.momentum)
    raise ValueError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------------------
# parameter updates


def ema_update(pair: EncoderPair, alpha: float) -> EncoderPair:
    """theta_tilde <- (1 - alpha) * theta + alpha * theta_tilde, in place."""
    pair.check()
    a = float(alpha)
    for name, p in pair.theta.items():
        slow = pair.theta_tilde[name].data
        slow *= slow.dtype.type(a)
        slow += slow.dtype.type(1.0 - a) * p.data
    return pair


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def decays(name: str) -> bool:
    """Weight decay skips layernorm gains/biases and the mask token."""
    return not (".ln1." in name or ".ln2." in name or name.startswith("norm.") or name == "mask_token")


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


def adamw_step(
    params: Params,
    grads: dict[str, np.ndarray],
    moments: AdamState,
    lr: float,
    cfg: TrainConfig,
    trainable: Sequence[str] | None = None,
) -> float:
    """One AdamW update in place; returns the pre-clip gradient norm."""
    names = list(params) if trainable is None else list(trainable)
    grads = {k: grads[k] for k in names}
    for k in names:
        if grads[k].shape != params[k].shape:
            raise nx.ShapeError(f"adamw: gradient for {k} has shape {grads[k].shape}, parameter {params[k].shape}")
        if (cfg.strict or nx.is_strict()) and not np.all(np.isfinite(grads[k])):
            raise NumericsError(f"adamw: non-finite gradient for parameter {k}")
    norm = clip_grad_norm(grads, cfg.grad_clip) if cfg.grad_clip else float("nan")
    moments.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**moments.t
    c2 = 1.0 - b2**moments.t
    for k in names:
        p = params[k].data
        g = grads[k]
        dt = p.dtype.type
        if cfg.weight_decay and decays(k):
            p *= dt(1.0 - lr * cfg.weight_decay)
        m = moments.m[k]
        v = moments.v[k]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        denom = np.sqrt(v / dt(c2))
        denom += dt(cfg.adam_eps)
        p -= dt(lr / c1) * m / denom
    return norm


# ---------------------------------------------------------------------------
# the training step


@dataclass
class Batch:
    full: np.ndarray  # (N, K, P)
    corrupted: np.ndarray  # (N, K, P)
    masks: np.ndarray  # (N, K) bool
    labels: list

    @classmethod
    def from_pairs(cls, pairs: Sequence[AugPair], vit_cfg: ViTConfig) -> "Batch":
        if not pairs:
            raise ValueError("empty batch")
        full = patchify(stack_pixels([p.full_view for p in pairs]), vit_cfg).astype(vit_cfg.np_dtype)
        cor = patchify(stack_pixels([p.corrupted_view_base for p in pairs]), vit_cfg).astype(vit_cfg.np_dtype)
        masks = np.stack([p.mask.flags for p in pairs])
        return cls(full, cor, masks, [p.full_view.label for p in pairs])


def check_no_leakage(tape: Tape, pair: EncoderPair, keys: Tensor | None) -> None:
    for name, t in pair.theta_tilde.items():
        if t.requires_grad or t.tape_id is not None or id(t) in tape._leaf_index:
            raise LeakageError(f"momentum parameter {name} participates in the gradient tape")
    if keys is not None and (keys.requires_grad or keys.tape_id is not None):
        raise LeakageError("key features participate in the gradient tape")


def train_step(
    pair: EncoderPair,
    batch: Sequence[AugPair] | Batch,
    cfg: TrainConfig,
    state: ScheduleState,
    moments: AdamState,
    loss_cfg: LossConfig = LossConfig(),
    codebook: TokenizerCodebook | None = None,
) -> LossReport:
    """Keys from the momentum twin, queries from the masked view, AdamW, then EMA."""
    if not isinstance(batch, Batch):
        batch = Batch.from_pairs(batch, pair.cfg)
    vcfg = pair.cfg
    lr = schedule_value("lr", state, cfg)
    alpha = schedule_value("momentum", state, cfg) if cfg.momentum_mode == "ema" else 0.0
    use_mask = cfg.mask_ratio > 0 and cfg.objective != "instance"
    masks = batch.masks if use_mask else np.ones_like(batch.masks)

    keys = None
    if cfg.objective != "beit":  # token prediction has no key branch
        with nx.no_tape():
            slow = encode(pair.theta_tilde, batch.full, None, vcfg)
            pooled = slow.patches.mean(axis=1) if cfg.objective == "instance" else slow.patches
            keys = project_head(pair.theta_tilde, pooled, vcfg)

    with nx.strict_mode(cfg.strict or nx.is_strict()), Tape() as tape:
        out = encode(pair.theta, batch.corrupted, masks if use_mask else None, vcfg)
        if cfg.objective == "conmim":
            queries = project_head(pair.theta, out.patches, vcfg)
            report = conmim_loss(queries, keys, masks, loss_cfg)
        elif cfg.objective == "instance":
            queries = project_head(pair.theta, out.patches.mean(axis=1), vcfg)
            report = instance_infonce_loss(queries, keys, loss_cfg.temperature)
        else:
            if codebook is None:
                raise ValueError("the token-prediction objective needs a codebook")
            n_idx, j_idx = np.nonzero(masks)
            feats = nx.take(out.patches.reshape(-1, vcfg.dim), n_idx * vcfg.num_patches + j_idx)
            logits = nx.linear(feats, pair.theta["tok_head.w"], pair.theta["tok_head.b"])
            ids = codebook.assign(batch.corrupted[n_idx, j_idx])
            report = beit_style_loss(logits, ids)
        check_no_leakage(tape, pair, keys)
        grads = nx.backward_accumulate(report.loss)
    param_grads = {k: grads[p] for k, p in pair.theta.items()}
    adamw_step(pair.theta, param_grads, moments, lr, cfg)
    ema_update(pair, alpha)
    state.step += 1
    return report


def add_token_head(pair: EncoderPair, vocab: int, seed: int) -> None:
    rng = generator(seed, "init", 1)
    dt = pair.cfg.np_dtype
    w = (rng.standard_normal((pair.cfg.dim, vocab)) * 0.02).clip(-0.04, 0.04).astype(dt)
    b = np.zeros(vocab, dtype=dt)
    pair.theta["tok_head.w"] = Tensor(w, requires_grad=True, name="tok_head.w")
    pair.theta["tok_head.b"] = Tensor(b, requires_grad=True, name="tok_head.b")
    pair.theta_tilde["tok_head.w"] = Tensor(w.copy(), name="tok_head.w")
    pair.theta_tilde["tok_head.b"] = Tensor(b.copy(), name="tok_head.b")


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CMIM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    pair: EncoderPair
    moments: AdamState
    state: ScheduleState
    config: dict


def _config_dump(pair, moments, state, config) -> dict:
    return {
        "config": config,
        "vit": asdict(pair.cfg),
        "state": asdict(state),
        "adam_t": moments.t,
    }


def save_checkpoint(pair: EncoderPair, moments: AdamState, state: ScheduleState, cfg: dict, path) -> Path:
    """Binary layout: magic, u32 version, u32-length JSON config, then tensor records."""
    path = Path(path)
    meta = json.dumps(_config_dump(pair, moments, state, cfg), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta]
    tensors: list[tuple[str, np.ndarray]] = []
    for prefix, group in (("theta", pair.theta), ("theta_tilde", pair.theta_tilde)):
        tensors += [(f"{prefix}/{k}", t.data) for k, t in group.items()]
    tensors += [(f"adam_m/{k}", a) for k, a in moments.m.items()]
    tensors += [(f"adam_v/{k}", a) for k, a in moments.v.items()]
    for name, arr in tensors:
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(
                f"truncated checkpoint reading {what}: need {n} bytes at offset {self.pos}, file has {len(self.raw)}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic in {path}: {raw[:4]!r}")
    r = _Reader(raw)
    r.take(4, "magic")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    meta = json.loads(r.take(r.u32("config length"), "config").decode("utf-8"))
    groups: dict[str, dict[str, np.ndarray]] = {"theta": {}, "theta_tilde": {}, "adam_m": {}, "adam_v": {}}
    while r.pos < len(raw):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, f"{name} header"))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes, f"{name} payload"), dtype=dt).reshape(dims)
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown tensor group {group!r}")
        groups[group][key] = arr.astype(dt.newbyteorder("="), copy=True)
    vit = ViTConfig(**meta["vit"])
    pair = EncoderPair(
        {k: Tensor(a, requires_grad=True, name=k) for k, a in groups["theta"].items()},
        {k: Tensor(a, name=k) for k, a in groups["theta_tilde"].items()},
        vit,
    )
    pair.check()
    moments = AdamState(groups["adam_m"], groups["adam_v"], int(meta["adam_t"]))
    state = ScheduleState(**meta["state"])
    return Checkpoint(pair, moments, state, meta["config"])


# ---------------------------------------------------------------------------
# the loop


METRIC_COLUMNS = ("step", "epoch", "lr", "momentum_alpha", "loss", "pos_key_rank_mean", "softmax_entropy_mean", "wall_ms")


@dataclass
class StepMetrics:
    step: int  # 0-based update index; lr and momentum_alpha are the values it used
    epoch: int
    lr: float
    momentum_alpha: float
    loss: float
    pos_key_rank_mean: float
    softmax_entropy_mean: float
    wall_ms: float

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class PretrainResult:
    pair: EncoderPair
    moments: AdamState
    state: ScheduleState
    history: list[StepMetrics]
    codebook: TokenizerCodebook | None = None


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return generator(seed, "order", epoch).permutation(n)


def aug_config_for(vit_cfg: ViTConfig, cfg: TrainConfig, base: AugConfig | None = None) -> AugConfig:
    base = base or AugConfig()
    kw = asdict(base)
    kw.update(
        image_side=vit_cfg.image_side,
        patch_side=vit_cfg.patch_side,
        mask_ratio=cfg.mask_ratio,
        mask_strategy=cfg.mask_strategy,
    )
    return AugConfig(**kw)


def pretrain(
    records: Sequence[ImageRecord],
    vit_cfg: ViTConfig,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    aug: AugConfig | None = None,
    pair: EncoderPair | None = None,
    on_step: Callable[[StepMetrics, LossReport], None] | None = None,
    on_epoch: Callable[[int, PretrainResult], None] | None = None,
    wall_clock: bool = False,
) -> PretrainResult:
    """Run the full loop.  Data order and augmentation seeds depend only on
    (seed, epoch, position) so variants of one config see identical batches."""
    aug = aug_config_for(vit_cfg, cfg, aug)
    if pair is None:
        pair = EncoderPair.create(vit_cfg, cfg.seed)
    codebook = None
    if cfg.objective == "beit":
        sample = stack_pixels(list(records[: min(len(records), 512)]))
        codebook = fit_codebook(patchify(sample, vit_cfg).reshape(-1, vit_cfg.patch_dim), cfg.codebook_size, cfg.seed)
        if "tok_head.w" not in pair.theta:
            add_token_head(pair, codebook.V, cfg.seed)
    moments = AdamState.zeros_like(pair.theta)
    state = make_schedule(len(records), cfg)
    per_epoch = max(1, len(records) // cfg.batch_size)
    history: list[StepMetrics] = []
    result = PretrainResult(pair, moments, state, history, codebook)
    stop = state.total_steps if cfg.max_steps is None else min(state.total_steps, cfg.max_steps)
    epoch = 0
    while state.step < stop:
        order = epoch_order(len(records), cfg.seed, epoch)
        for b in range(per_epoch):
            if state.step >= stop:
                break
            t0 = time.perf_counter()
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            pairs = [augment_pair(records[i], derive_seed(cfg.seed, "augment", epoch, int(i)), aug) for i in idx]
            t = state.step
            lr = schedule_value("lr", state, cfg)
            alpha = schedule_value("momentum", state, cfg) if cfg.momentum_mode == "ema" else 0.0
            report = train_step(pair, pairs, cfg, state, moments, loss_cfg, codebook)
            wall = (time.perf_counter() - t0) * 1000.0 if wall_clock else 0.0
            m = StepMetrics(
                t, epoch, lr, alpha, report.value, report.mean_rank, report.mean_softmax_entropy, wall
            )
            history.append(m)
            if on_step is not None:
                on_step(m, report)
        epoch += 1
        if on_epoch is not None:
            on_epoch(epoch, result)
    return result
