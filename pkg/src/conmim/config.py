"""Run configuration: one text file with ``[section]`` headers and ``key = value`` lines."""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import AugConfig
from .eval import ProbeConfig
from .objectives import LossConfig
from .trainer import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration; the CLI maps it to a usage error."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # "synth" or "manifest"
    n_train: int = 8000
    n_val: int = 2000
    classes: int = 8
    manifest: str = ""
    val_manifest: str = ""

    def __post_init__(self):
        if self.source not in ("synth", "manifest"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "manifest" and not (self.manifest and self.val_manifest):
            raise ConfigError("manifest source needs both manifest and val_manifest")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be positive")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    wall_clock: bool = False
    keep_checkpoints: int = 1  # per-epoch checkpoints retained; 0 keeps all

    def __post_init__(self):
        if self.keep_checkpoints < 0:
            raise ConfigError("keep_checkpoints must be >= 0")


# keys owned by other sections (geometry comes from [vit], masking from [train])
_AUG_DERIVED = ("image_side", "patch_side", "mask_strategy", "mask_ratio")

SECTIONS = {
    "vit": ViTConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "probe": ProbeConfig,
    "aug": AugConfig,
    "data": DataConfig,
    "run": RunSection,
}


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        # the run seed is the single root of every random stream
        if self.train.seed != self.run.seed:
            self.train = replace(self.train, seed=self.run.seed)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with per-section field overrides, e.g. ``train={"mask_ratio": 0.0}``."""
        kw = {}
        for name, sub in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            _check_keys(name, sub)
            kw[name] = _rebuild(getattr(self, name), sub)
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _allowed(section: str) -> list[str]:
    names = [f.name for f in fields(SECTIONS[section])]
    if section == "aug":
        names = [n for n in names if n not in _AUG_DERIVED]
    if section == "train":
        names = [n for n in names if n != "seed"]
    return names


def _check_keys(section: str, keys) -> None:
    allowed = _allowed(section)
    for k in keys:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r} in [{section}]; allowed: {', '.join(allowed)}")


def _rebuild(obj, values: dict):
    try:
        return replace(obj, **values)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _parse_value(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("none", ""):
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _parse_value(text, inner, where)
    if origin is tuple:
        parts = text.split(",")
        if len(parts) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_value(p, a, where) for p, a in zip(parts, args))
    if hint is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ConfigError(f"{where}: expected true or false, got {text!r}")
        return low == "true"
    try:
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {hint.__name__}") from None
    if hint is str:
        return text
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text.  Unknown sections and keys are rejected."""
    cp = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), interpolation=None
    )
    cp.optionxform = str  # keys are case-sensitive field names
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e.message if hasattr(e, 'message') else e}") from e
    if cp.defaults():
        raise ConfigError(f"{source}: [DEFAULT] section is not supported")
    raw: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; allowed: {', '.join(SECTIONS)}")
        _check_keys(section, cp[section])
        raw[section] = dict(cp[section])
    return _build(raw, source)


def _build(raw: dict[str, dict[str, str]], source: str) -> RunConfig:
    base = RunConfig()
    kw = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        values = {k: _parse_value(v, hints[k], f"{source}: [{section}] {k}") for k, v in raw.get(section, {}).items()}
        kw[section] = _rebuild(getattr(base, section), values)
    return RunConfig(**kw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Render every field; ``parse_config(dump_config(c)) == c``."""
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        for name in _allowed(section):
            out.append(f"{name} = {_format_value(getattr(obj, name))}")
        out.append("")
    return "\n".join(out)


def from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict`` (as stored in checkpoints)."""
    raw = {}
    for section, values in d.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        # derived fields (train.seed, aug geometry) are recomputed, not read back
        derived = {f.name for f in fields(SECTIONS[section])} - set(_allowed(section))
        values = {k: v for k, v in values.items() if k not in derived}
        _check_keys(section, values)
        raw[section] = {k: _format_value(tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
    return _build(raw, "<dict>")


def apply_sets(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides given on the command line."""
    raw = {s: {k: _format_value(getattr(getattr(cfg, s), k)) for k in _allowed(s)} for s in SECTIONS}
    for item in assignments:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in override {item!r}")
        _check_keys(section, [key])
        raw[section][key] = value
    return _build(raw, "--set")
