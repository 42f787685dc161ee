"""Image sources, the paired augmentation pipeline, and mask sampling."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .rng import derive_seed, generator

SHAPES = ("disk", "square", "stripes", "checker", "ring", "cross", "gradient_blob", "diagonal")


class DataError(ValueError):
    pass


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (H, W, 3), values in [0, 1]
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"{self.source_id or 'image'}: expected (H, W, 3) pixels, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DataError(f"{self.source_id or 'image'}: pixels outside [0, 1]")
        self.pixels = px


@dataclass
class MaskPattern:
    flags: np.ndarray  # (K,) bool
    strategy: str = "random"
    ratio: float = 0.75

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.flags))

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)


@dataclass
class AugConfig:
    image_side: int = 32
    patch_side: int = 4
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    # which recipe each view receives: "strong" or "basic"
    full_view: str = "strong"
    corrupted_view: str = "basic"
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    blur_p: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_p: float = 0.2
    solarize_threshold: float = 0.5
    mask_strategy: str = "random"
    mask_ratio: float = 0.75

    def __post_init__(self):
        for view in (self.full_view, self.corrupted_view):
            if view not in ("strong", "basic"):
                raise DataError(f"unknown augmentation recipe {view!r}")
        if self.image_side % self.patch_side:
            raise DataError("image_side must be divisible by patch_side")

    @property
    def num_patches(self) -> int:
        g = self.image_side // self.patch_side
        return g * g


@dataclass
class Geometry:
    flip: bool
    top: float
    left: float
    height: float
    width: float


@dataclass
class AugPair:
    full_view: ImageRecord
    corrupted_view_base: ImageRecord
    mask: MaskPattern
    shared_geom: Geometry
    photometric: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# PPM


_PPM_HEADER = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    m = _PPM_HEADER.match(buf, pos)
    pos = m.end()
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("truncated PPM header")
    return buf[start:pos], pos


def load_ppm(raw: bytes, source_id: str = "", label: int | None = None) -> ImageRecord:
    """Parse a binary P6 PPM with maxval 255 into an ImageRecord."""
    if raw[:2] != b"P6":
        raise DataError("not P6")
    pos = 2
    try:
        w_tok, pos = _read_token(raw, pos)
        h_tok, pos = _read_token(raw, pos)
        m_tok, pos = _read_token(raw, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise DataError(f"malformed PPM header: {exc}") from None
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval}; expected 255")
    if width <= 0 or height <= 0:
        raise DataError(f"invalid PPM dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise DataError(f"truncated PPM payload: expected {expected} bytes, got {len(payload)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageRecord(px.astype(np.float32) / np.float32(255.0), label, source_id)


def write_ppm(record: ImageRecord | np.ndarray) -> bytes:
    px = record.pixels if isinstance(record, ImageRecord) else np.asarray(record)
    h, w, _ = px.shape
    data = np.clip(np.rint(np.asarray(px, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + data.tobytes()


def read_manifest(path: str | os.PathLike) -> list[ImageRecord]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'path<TAB>label'")
        img_path = Path(parts[0])
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        label = int(parts[1]) if parts[1].strip() not in ("", "-") else None
        records.append(load_ppm(img_path.read_bytes(), str(parts[0]), label))
    return records


def write_dataset(records: Iterable[ImageRecord], out_dir: str | os.PathLike) -> Path:
    """Write PPM files plus a ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rec in enumerate(records):
        rel = f"images/{i:06d}.ppm"
        (out / rel).write_bytes(write_ppm(rec))
        lines.append(f"{rel}\t{'' if rec.label is None else rec.label}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# synthetic shapes


def _contrasting_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bg = rng.uniform(0.0, 1.0, 3)
    while True:
        fg = rng.uniform(0.0, 1.0, 3)
        if np.linalg.norm(fg - bg) >= 0.5:
            return bg, fg


def _shape_alpha(kind: int, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    cx, cy = rng.uniform(0.3, 0.7, 2) * side
    r = rng.uniform(0.2, 0.35) * side
    dx, dy = xx - cx, yy - cy
    dist = np.hypot(dx, dy)
    name = SHAPES[kind % len(SHAPES)]
    if name == "disk":
        return (dist < r).astype(np.float64)
    if name == "square":
        return (np.maximum(np.abs(dx), np.abs(dy)) < r * 0.85).astype(np.float64)
    if name == "stripes":
        period = rng.uniform(4.0, 8.0)
        coord = yy if rng.random() < 0.5 else xx
        return (np.sin(2 * np.pi * coord / period + rng.uniform(0, 2 * np.pi)) > 0).astype(np.float64)
    if name == "checker":
        cell = rng.uniform(3.0, 7.0)
        ox, oy = rng.uniform(0, cell, 2)
        return ((np.floor((xx + ox) / cell) + np.floor((yy + oy) / cell)) % 2).astype(np.float64)
    if name == "ring":
        width = rng.uniform(0.25, 0.4) * r
        return (np.abs(dist - r) < width).astype(np.float64)
    if name == "cross":
        arm = rng.uniform(0.2, 0.35) * r
        return (((np.abs(dx) < arm) & (np.abs(dy) < r)) | ((np.abs(dy) < arm) & (np.abs(dx) < r))).astype(np.float64)
    if name == "gradient_blob":
        s = 0.6 * r
        return np.exp(-(dist**2) / (2 * s * s))
    # diagonal band
    slope = 1.0 if rng.random() < 0.5 else -1.0
    width = rng.uniform(0.12, 0.22) * side
    return (np.abs(dx - slope * dy) / math.sqrt(2.0) < width).astype(np.float64)


def synth_image(seed: int, index: int, classes: int = 8, side: int = 32) -> ImageRecord:
    rng = generator(seed, "data", index)
    # labels are a fresh permutation within each block of `classes` indices,
    # so any prefix of the dataset is balanced to within one image per class
    block, slot = divmod(index, classes)
    label = int(generator(seed, "labels", block).permutation(classes)[slot])
    bg, fg = _contrasting_colors(rng)
    alpha = _shape_alpha(label, side, rng)[..., None]
    img = bg * (1.0 - alpha) + fg * alpha
    img = img + rng.normal(0.0, 0.04, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageRecord(img, label, f"synth:{seed}:{index}")


def synth_dataset(n: int, classes: int = 8, side: int = 32, seed: int = 0, start: int = 0) -> list[ImageRecord]:
    """Deterministic shape images; label is the shape id."""
    if classes < 2:
        raise DataError("synth_dataset needs at least 2 classes")
    if classes > len(SHAPES):
        raise DataError(f"synth_dataset supports at most {len(SHAPES)} classes")
    return [synth_image(seed, start + i, classes, side) for i in range(n)]


def stack_pixels(records: list[ImageRecord]) -> np.ndarray:
    return np.stack([r.pixels for r in records]).astype(np.float32)


# ---------------------------------------------------------------------------
# masks


def mask_count(k: int, ratio: float) -> int:
    # guard against 0.7*10 == 7.000000000000001 style rounding
    return int(math.ceil(ratio * k - 1e-9))


def sample_mask(k: int, strategy: str = "random", ratio: float = 0.75, seed: int | np.random.Generator = 0) -> MaskPattern:
    if not 0.0 < ratio < 1.0:
        raise DataError(f"mask ratio must be in (0, 1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed, "mask")
    target = mask_count(k, ratio)
    flags = np.zeros(k, dtype=bool)
    if strategy == "random":
        flags[rng.choice(k, size=target, replace=False)] = True
    elif strategy == "block":
        flags = _block_mask(k, target, rng)
    else:
        raise DataError(f"unknown mask strategy {strategy!r}")
    return MaskPattern(flags, strategy, ratio)


def _block_mask(k: int, target: int, rng: np.random.Generator) -> np.ndarray:
    g = math.isqrt(k)
    if g * g != k:
        raise DataError(f"block masking needs a square patch grid, got K={k}")
    grid = np.zeros((g, g), dtype=bool)
    log_lo, log_hi = math.log(0.3), math.log(1 / 0.3)
    while grid.sum() < target:
        need = target - int(grid.sum())
        area = rng.uniform(4, max(4, need) + 1e-9)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        h = min(max(h, 2), g)
        w = min(max(w, 2), g)
        if not 0.3 <= h / w <= 3.3:
            continue
        top = int(rng.integers(0, g - h + 1))
        left = int(rng.integers(0, g - w + 1))
        before = grid.copy()
        grid[top : top + h, left : left + w] = True
        excess = int(grid.sum()) - target
        if excess > 0:
            new_cells = np.flatnonzero(grid & ~before)
            drop = rng.choice(new_cells, size=excess, replace=False)
            grid.reshape(-1)[drop] = False
    return grid.reshape(-1)


# ---------------------------------------------------------------------------
# augmentation


def sample_geometry(rng: np.random.Generator, side_h: int, side_w: int, cfg: AugConfig) -> Geometry:
    flip = bool(rng.random() < cfg.flip_p)
    area = side_h * side_w
    log_r = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(*log_r))
        w = math.sqrt(target * ratio)
        h = math.sqrt(target / ratio)
        if 0 < w <= side_w and 0 < h <= side_h:
            top = rng.uniform(0, side_h - h)
            left = rng.uniform(0, side_w - w)
            return Geometry(flip, top, left, h, w)
    return Geometry(flip, 0.0, 0.0, float(side_h), float(side_w))


def flip_horizontal(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1]


def resized_crop(pixels: np.ndarray, geom: Geometry, out: int) -> np.ndarray:
    """Bilinear resample of the crop window to out x out (half-pixel centers)."""
    h, w, _ = pixels.shape
    ys = geom.top + (np.arange(out) + 0.5) * (geom.height / out) - 0.5
    xs = geom.left + (np.arange(out) + 0.5) * (geom.width / out) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    p = pixels.astype(np.float64)
    top = p[y0][:, x0] * (1 - wx) + p[y0][:, x1] * wx
    bot = p[y1][:, x0] * (1 - wx) + p[y1][:, x1] * wx
    return np.clip(top * (1 - wy) + bot * wy, 0.0, 1.0)


def apply_geometry(pixels: np.ndarray, geom: Geometry, out: int) -> np.ndarray:
    if geom.flip:
        pixels = flip_horizontal(pixels)
    return resized_crop(pixels, geom, out)


def _gray(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_jitter(img: np.ndarray, b: float, c: float, s: float, h: float) -> np.ndarray:
    """Brightness, contrast, saturation, hue factors applied in that order."""
    img = np.clip(img * b, 0.0, 1.0)
    m = _gray(img).mean()
    img = np.clip((img - m) * c + m, 0.0, 1.0)
    gray = _gray(img)[..., None]
    img = np.clip((img - gray) * s + gray, 0.0, 1.0)
    if h != 0.0:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + h) % 1.0
        img = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return img


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return np.clip(ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0.0), mode="reflect"), 0.0, 1.0)


def solarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img)


def strong_photometric(img: np.ndarray, rng: np.random.Generator, cfg: AugConfig) -> tuple[np.ndarray, dict]:
    """Color jitter, then blur, then solarization (fixed order)."""
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    img = color_jitter(img, b, c, s, h)
    applied = {"brightness": b, "contrast": c, "saturation": s, "hue": h, "blur": None, "solarize": False}
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = gaussian_blur(img, sigma)
        applied["blur"] = sigma
    if rng.random() < cfg.solarize_p:
        img = solarize(img, cfg.solarize_threshold)
        applied["solarize"] = True
    return img, applied


def augment_pair(img: ImageRecord, seed: int, cfg: AugConfig = AugConfig(), mask: bool = True) -> AugPair:
    """Two aligned views of one image plus a fresh mask.

    Both views share flip and crop; each then gets its configured recipe
    ("strong" adds the photometric chain, "basic" adds nothing).
    """
    rng = generator(seed, "augment")
    h, w, _ = img.pixels.shape
    geom = sample_geometry(rng, h, w, cfg)
    base = apply_geometry(img.pixels, geom, cfg.image_side)
    views = {}
    info = {}
    # each recipe draws from its own stream so toggling one view leaves the other's draws intact
    for name, recipe in (("full", cfg.full_view), ("corrupted", cfg.corrupted_view)):
        if recipe == "strong":
            views[name], info[name] = strong_photometric(base, generator(seed, "augment", 1 if name == "full" else 2), cfg)
        else:
            views[name], info[name] = base, {}
    if mask and cfg.mask_ratio > 0:
        mp = sample_mask(cfg.num_patches, cfg.mask_strategy, cfg.mask_ratio, generator(seed, "mask"))
    else:
        mp = MaskPattern(np.zeros(cfg.num_patches, dtype=bool), cfg.mask_strategy, 0.0)
    return AugPair(
        ImageRecord(views["full"].astype(np.float32), img.label, img.source_id),
        ImageRecord(views["corrupted"].astype(np.float32), img.label, img.source_id),
        mp,
        geom,
        info,
    )


def batch_seed(seed: int, step: int, index: int) -> int:
    return derive_seed(seed, "batch", step, index)
