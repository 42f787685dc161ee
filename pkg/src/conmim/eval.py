"""Frozen-feature probes and [CLS] attention export."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import ImageRecord, stack_pixels
from .numerics import Tape, Tensor
from .rng import generator
from .trainer import AdamState, TrainConfig, adamw_step
from .vit import EncoderPair, Params, ViTConfig, copy_params, embed, encode, patchify, run_blocks


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "linear"
    unfrozen_blocks: int = 0
    epochs: int = 30
    lr: float = 1e-3
    feature_source: str = "mean_patch"
    batch_size: int = 256
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.mode not in ("linear", "partial"):
            raise ProbeError(f"unknown probe mode {self.mode!r}")
        if self.feature_source not in ("cls", "mean_patch"):
            raise ProbeError(f"unknown feature_source {self.feature_source!r}")
        if self.unfrozen_blocks < 0:
            raise ProbeError("unfrozen_blocks must be >= 0")


def _check_split(name: str, records: Sequence[ImageRecord]) -> None:
    if not records:
        raise ProbeError(f"empty {name} split")
    if any(r.label is None for r in records):
        raise ProbeError(f"{name} split has unlabeled records")


def _pool(cls: np.ndarray, patches: np.ndarray, source: str) -> np.ndarray:
    return cls if source == "cls" else patches.mean(axis=1)


def extract_features(params: Params, records: Sequence[ImageRecord], cfg: ViTConfig, source="mean_patch", batch=256):
    """Backbone features (projection head bypassed) for each record."""
    out = []
    with nx.no_tape():
        for i in range(0, len(records), batch):
            x = patchify(stack_pixels(list(records[i : i + batch])), cfg).astype(cfg.np_dtype)
            enc = encode(params, x, None, cfg)
            out.append(_pool(enc.cls.data, enc.patches.data, source))
    return np.concatenate(out).astype(np.float64)


def _labels(records) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def _optim_cfg(cfg: ProbeConfig) -> TrainConfig:
    return TrainConfig(peak_lr=cfg.lr, min_lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=None)


def train_linear_classifier(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: ProbeConfig = ProbeConfig(),
    seed: int = 0,
    classes: int | None = None,
) -> float:
    """Standardize features with train statistics, fit softmax regression, return val top-1."""
    if len(train_x) == 0 or len(val_x) == 0:
        raise ProbeError("empty split")
    c = int(classes or max(train_y.max(), val_y.max()) + 1)
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    tx = ((train_x - mu) / sd).astype(np.float32)
    vx = ((val_x - mu) / sd).astype(np.float32)
    d = tx.shape[1]
    params = {"w": Tensor(np.zeros((d, c), np.float32), requires_grad=True), "b": Tensor(np.zeros(c, np.float32), requires_grad=True)}
    moments = AdamState.zeros_like(params)
    opt = _optim_cfg(cfg)
    rng = generator(seed, "probe")
    for _ in range(cfg.epochs):
        order = rng.permutation(len(tx))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            with Tape():
                loss = nx.cross_entropy(nx.linear(Tensor(tx[idx]), params["w"], params["b"]), train_y[idx])
                grads = nx.backward_accumulate(loss)
            adamw_step(params, {k: grads[p] for k, p in params.items()}, moments, cfg.lr, opt)
    pred = (vx @ params["w"].data + params["b"].data).argmax(axis=1)
    return float((pred == val_y).mean())


def linear_probe(
    pair: EncoderPair,
    train: Sequence[ImageRecord],
    val: Sequence[ImageRecord],
    cfg: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> float:
    """Top-1 accuracy of a linear classifier on frozen in-training-encoder features."""
    _check_split("train", train)
    _check_split("val", val)
    tx = extract_features(pair.theta, train, pair.cfg, cfg.feature_source)
    vx = extract_features(pair.theta, val, pair.cfg, cfg.feature_source)
    ty, vy = _labels(train), _labels(val)
    return train_linear_classifier(tx, ty, vx, vy, cfg, seed, classes=int(max(ty.max(), vy.max()) + 1))


def _prefix_tokens(params: Params, records, cfg: ViTConfig, n_frozen: int, batch=256) -> np.ndarray:
    """Token states after the frozen blocks (embedding included)."""
    out = []
    with nx.no_tape():
        for i in range(0, len(records), batch):
            x = Tensor(patchify(stack_pixels(list(records[i : i + batch])), cfg).astype(cfg.np_dtype))
            tokens, _ = embed(params, x, None, cfg)
            out.append(run_blocks(params, tokens, cfg, range(n_frozen)).data)
    return np.concatenate(out)


@dataclass
class PartialResult:
    accuracy: float
    params: Params


def partial_finetune(
    pair: EncoderPair,
    train: Sequence[ImageRecord],
    val: Sequence[ImageRecord],
    cfg: ProbeConfig = ProbeConfig(mode="partial"),
    seed: int = 0,
    return_params: bool = False,
):
    """Train the last ``unfrozen_blocks`` blocks plus a linear classifier on a copy of theta."""
    depth = pair.cfg.depth
    u = cfg.unfrozen_blocks
    if not 0 <= u <= depth:
        raise ProbeError(f"unfrozen_blocks {u} outside [0, {depth}]")
    _check_split("train", train)
    _check_split("val", val)
    if u == 0:
        acc = linear_probe(pair, train, val, cfg, seed)
        return PartialResult(acc, copy_params(pair.theta, False)) if return_params else acc
    vcfg = pair.cfg
    params = copy_params(pair.theta, requires_grad=False)
    trainable = [k for k in params if (k.startswith("blocks.") and int(k.split(".")[1]) >= depth - u)]
    for k in trainable:
        params[k].requires_grad = True
    ty, vy = _labels(train), _labels(val)
    c = int(max(ty.max(), vy.max()) + 1)
    frozen = depth - u
    t_tok = _prefix_tokens(params, train, vcfg, frozen)
    v_tok = _prefix_tokens(params, val, vcfg, frozen)

    def features(tok: np.ndarray) -> Tensor:
        x = run_blocks(params, Tensor(tok), vcfg, range(frozen, depth))
        x = nx.layer_norm(x, params["norm.g"], params["norm.b"])
        return x[:, 0] if cfg.feature_source == "cls" else x[:, 1:].mean(axis=1)

    # standardization statistics are fixed from the starting features
    with nx.no_tape():
        f0 = np.concatenate([features(t_tok[i : i + 256]).data for i in range(0, len(t_tok), 256)]).astype(np.float64)
    mu = f0.mean(axis=0).astype(vcfg.np_dtype)
    inv_sd = (1.0 / (f0.std(axis=0) + 1e-6)).astype(vcfg.np_dtype)
    head = {
        "probe.w": Tensor(np.zeros((vcfg.dim, c), vcfg.np_dtype), requires_grad=True),
        "probe.b": Tensor(np.zeros(c, vcfg.np_dtype), requires_grad=True),
    }
    live = {**{k: params[k] for k in trainable}, **head}
    moments = AdamState.zeros_like(live)
    opt = _optim_cfg(cfg)
    rng = generator(seed, "probe")
    for _ in range(cfg.epochs):
        order = rng.permutation(len(t_tok))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            with Tape():
                f = (features(t_tok[idx]) - mu) * inv_sd
                loss = nx.cross_entropy(nx.linear(f, head["probe.w"], head["probe.b"]), ty[idx])
                grads = nx.backward_accumulate(loss)
            adamw_step(live, {k: grads[p] for k, p in live.items()}, moments, cfg.lr, opt)
    with nx.no_tape():
        preds = []
        for i in range(0, len(v_tok), 256):
            f = (features(v_tok[i : i + 256]) - mu) * inv_sd
            preds.append(nx.linear(f, head["probe.w"], head["probe.b"]).data.argmax(axis=1))
    acc = float((np.concatenate(preds) == vy).mean())
    for k in trainable:
        params[k].requires_grad = False
    return PartialResult(acc, params) if return_params else acc


# ---------------------------------------------------------------------------
# attention export


@dataclass
class AttentionExport:
    grid: np.ndarray  # (g, g) head-averaged [CLS] -> patch weights
    cls_self: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        for row in self.grid:
            buf.write(",".join(f"{v:.8f}" for v in row) + "\n")
        return buf.getvalue()


def export_attention(pair: EncoderPair, image: ImageRecord | np.ndarray, block: int) -> AttentionExport:
    cfg = pair.cfg
    if not 0 <= block < cfg.depth:
        raise ProbeError(f"block {block} outside [0, {cfg.depth})")
    px = image.pixels if isinstance(image, ImageRecord) else np.asarray(image)
    with nx.no_tape():
        enc = encode(pair.theta, patchify(px, cfg).astype(cfg.np_dtype), None, cfg, return_attn=True)
    att = enc.attn[block][0].astype(np.float64)  # (H, T, T)
    row = att[:, 0, :].mean(axis=0)
    return AttentionExport(row[1:].reshape(cfg.grid, cfg.grid), float(row[0]))


def spatial_entropy(grid: np.ndarray) -> float:
    p = grid.reshape(-1) / grid.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def attention_entropy_variance(pair: EncoderPair, images: Sequence[ImageRecord], block: int) -> float:
    """Variance across images of the spatial entropy of the [CLS] attention grid."""
    ents = [spatial_entropy(export_attention(pair, im, block).grid) for im in images]
    return float(np.var(ents))
