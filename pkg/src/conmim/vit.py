"""A small pre-norm Vision Transformer with a mask token and projection head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .rng import generator

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 32
    patch_side: int = 4
    depth: int = 4
    dim: int = 96
    heads: int = 4
    proj_depth: int = 3
    mlp_ratio: int = 4
    dtype: str = "float32"
    # "embedding": mask token replaces patch embeddings; "pixel": replaces raw patch pixels
    mask_mode: str = "embedding"

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.proj_depth < 0 or self.depth < 1:
            raise ValueError("depth must be >= 1 and proj_depth >= 0")
        if self.mask_mode not in ("embedding", "pixel"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * 3

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def patchify(image: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """(..., H, W, 3) image(s) -> (..., K, patch_side*patch_side*3), raster order."""
    image = np.asarray(image)
    s, p = cfg.image_side, cfg.patch_side
    if image.shape[-3:] != (s, s, 3):
        raise ShapeError(f"patchify: expected (..., {s}, {s}, 3) image, got {image.shape}")
    g = cfg.grid
    lead = image.shape[:-3]
    x = image.reshape(*lead, g, p, g, p, 3)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return np.ascontiguousarray(x).reshape(*lead, g * g, p * p * 3)


def unpatchify(patches: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    patches = np.asarray(patches)
    g, p = cfg.grid, cfg.patch_side
    if patches.shape[-2:] != (g * g, p * p * 3):
        raise ShapeError(f"unpatchify: expected (..., {g * g}, {p * p * 3}), got {patches.shape}")
    lead = patches.shape[:-2]
    n = len(lead)
    x = patches.reshape(*lead, g, g, p, p, 3)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return np.ascontiguousarray(x).reshape(*lead, g * p, g * p, 3)


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_params(cfg: ViTConfig, seed: int) -> Params:
    """Weights ~ truncated N(0, 0.02), biases 0, layernorm gains 1."""
    rng = generator(seed, "init")
    dt = cfg.np_dtype
    d, k = cfg.dim, cfg.num_patches
    hidden = d * cfg.mlp_ratio
    arrays: dict[str, np.ndarray] = {}

    def w(name, shape):
        arrays[name] = _trunc_normal(rng, shape, dtype=dt)

    def zeros(name, shape):
        arrays[name] = np.zeros(shape, dtype=dt)

    def ones(name, shape):
        arrays[name] = np.ones(shape, dtype=dt)

    w("patch_embed.w", (cfg.patch_dim, d))
    zeros("patch_embed.b", (d,))
    w("cls_token", (d,))
    w("pos_embed", (k + 1, d))
    w("mask_token", (d,) if cfg.mask_mode == "embedding" else (cfg.patch_dim,))
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        ones(pre + "ln1.g", (d,))
        zeros(pre + "ln1.b", (d,))
        w(pre + "attn.qkv.w", (d, 3 * d))
        zeros(pre + "attn.qkv.b", (3 * d,))
        w(pre + "attn.proj.w", (d, d))
        zeros(pre + "attn.proj.b", (d,))
        ones(pre + "ln2.g", (d,))
        zeros(pre + "ln2.b", (d,))
        w(pre + "mlp.fc1.w", (d, hidden))
        zeros(pre + "mlp.fc1.b", (hidden,))
        w(pre + "mlp.fc2.w", (hidden, d))
        zeros(pre + "mlp.fc2.b", (d,))
    ones("norm.g", (d,))
    zeros("norm.b", (d,))
    for i in range(cfg.proj_depth):
        w(f"head.{i}.w", (d, d))
        zeros(f"head.{i}.b", (d,))
    return {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}


def block_index(name: str) -> int | None:
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    return None


def is_head_param(name: str) -> bool:
    return name.startswith("head.")


@dataclass
class EncodeOutput:
    cls: Tensor  # (N, D)
    patches: Tensor  # (N, K, D)
    attn: list[np.ndarray] = field(default_factory=list)  # per block (N, H, K+1, K+1)
    embedded: np.ndarray | None = None  # token embeddings before block 1, (N, K, D)


def _attention(x: Tensor, p: Params, pre: str, cfg: ViTConfig, keep: list | None) -> Tensor:
    n, t, d = x.shape
    h = cfg.heads
    dh = d // h
    qkv = nx.linear(x, p[pre + "qkv.w"], p[pre + "qkv.b"])
    qkv = qkv.reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
    q = qkv[0] * (1.0 / math.sqrt(dh))
    k = qkv[1]
    v = qkv[2]
    att = nx.softmax(q @ k.transpose(0, 1, 3, 2), axis=-1)
    if keep is not None:
        keep.append(att.data)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    return nx.linear(out, p[pre + "proj.w"], p[pre + "proj.b"])


def mask_array(mask) -> np.ndarray:
    """Boolean array from a MaskPattern, a sequence of them, or raw flags."""
    if isinstance(mask, np.ndarray):
        return mask.astype(bool, copy=False)
    if hasattr(mask, "flags") and hasattr(mask, "strategy"):
        return np.asarray(mask.flags, dtype=bool)
    if isinstance(mask, (list, tuple)) and mask and hasattr(mask[0], "strategy"):
        return np.stack([np.asarray(m.flags, dtype=bool) for m in mask])
    return np.asarray(mask, dtype=bool)


def embed(params: Params, x: Tensor, m: np.ndarray | None, cfg: ViTConfig) -> tuple[Tensor, np.ndarray]:
    """Patch embedding with mask-token substitution, [CLS] prepended, positions added."""
    n = x.shape[0]
    if m is not None and cfg.mask_mode == "pixel":
        x = nx.where(m[:, :, None], params["mask_token"], x)
    emb = nx.linear(x, params["patch_embed.w"], params["patch_embed.b"])
    if m is not None and cfg.mask_mode == "embedding":
        emb = nx.where(m[:, :, None], params["mask_token"], emb)
    pos = params["pos_embed"]
    cls = params["cls_token"].reshape(1, 1, cfg.dim) + pos[0:1].reshape(1, 1, cfg.dim)
    if n > 1:
        cls = cls + np.zeros((n, 1, cfg.dim), dtype=cfg.np_dtype)
    return nx.concat([cls, emb + pos[1:]], axis=1), emb.data


def run_blocks(params: Params, tokens: Tensor, cfg: ViTConfig, blocks=None, keep: list | None = None) -> Tensor:
    for i in range(cfg.depth) if blocks is None else blocks:
        pre = f"blocks.{i}."
        y = nx.layer_norm(tokens, params[pre + "ln1.g"], params[pre + "ln1.b"])
        tokens = tokens + _attention(y, params, pre + "attn.", cfg, keep)
        y = nx.layer_norm(tokens, params[pre + "ln2.g"], params[pre + "ln2.b"])
        y = nx.gelu(nx.linear(y, params[pre + "mlp.fc1.w"], params[pre + "mlp.fc1.b"]))
        tokens = tokens + nx.linear(y, params[pre + "mlp.fc2.w"], params[pre + "mlp.fc2.b"])
    return tokens


def encode(
    params: Params,
    patches,
    mask=None,
    cfg: ViTConfig = ViTConfig(),
    return_attn: bool = False,
) -> EncodeOutput:
    """Encode patch matrices (K, P) or (N, K, P).

    Masked positions use the mask token instead of the patch content, at the
    embedding stage (or pixel stage under ``mask_mode="pixel"``).
    """
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=cfg.np_dtype))
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    n, k, pdim = x.shape
    if k != cfg.num_patches or pdim != cfg.patch_dim:
        raise ShapeError(f"encode: expected (N, {cfg.num_patches}, {cfg.patch_dim}) patches, got {x.shape}")
    m = None
    if mask is not None:
        m = mask_array(mask)
        if m.ndim == 1:
            m = m[None, :]
        if m.shape[-1] != k:
            raise ShapeError(f"encode: mask length {m.shape[-1]} does not match K={k}")
        m = np.broadcast_to(m, (n, k))
    tokens, embedded = embed(params, x, m, cfg)
    keep: list | None = [] if return_attn else None
    tokens = run_blocks(params, tokens, cfg, None, keep)
    tokens = nx.layer_norm(tokens, params["norm.g"], params["norm.b"])
    cls_out = tokens[:, 0]
    patch_out = tokens[:, 1:]
    if single:
        cls_out = cls_out.reshape(cfg.dim)
        patch_out = patch_out.reshape(k, cfg.dim)
    return EncodeOutput(cls_out, patch_out, keep or [], embedded)


def project_head(params: Params, features, cfg: ViTConfig) -> Tensor:
    """proj_depth linear layers with GELU between them; the last layer stays linear."""
    if cfg.proj_depth < 1:
        raise ValueError("project_head needs proj_depth >= 1")
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=cfg.np_dtype))
    for i in range(cfg.proj_depth):
        x = nx.linear(x, params[f"head.{i}.w"], params[f"head.{i}.b"])
        if i < cfg.proj_depth - 1:
            x = nx.gelu(x)
    return x


def copy_params(params: Params, requires_grad: bool) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


@dataclass
class EncoderPair:
    """In-training parameters and their momentum twin."""

    theta: Params
    theta_tilde: Params
    cfg: ViTConfig

    @classmethod
    def create(cls, cfg: ViTConfig, seed: int) -> "EncoderPair":
        theta = init_params(cfg, seed)
        return cls(theta, copy_params(theta, requires_grad=False), cfg)

    def check(self) -> None:
        if self.theta.keys() != self.theta_tilde.keys():
            raise ShapeError("encoder pair: parameter names differ")
        for k, v in self.theta.items():
            if v.shape != self.theta_tilde[k].shape:
                raise ShapeError(f"encoder pair: {k} has shapes {v.shape} and {self.theta_tilde[k].shape}")
            if self.theta_tilde[k].requires_grad:
                raise ShapeError(f"encoder pair: momentum parameter {k} requires grad")

    def sync(self) -> None:
        """Copy theta into theta_tilde."""
        for k, v in self.theta.items():
            self.theta_tilde[k].data[...] = v.data

    def clone(self) -> "EncoderPair":
        return EncoderPair(copy_params(self.theta, True), copy_params(self.theta_tilde, False), self.cfg)
