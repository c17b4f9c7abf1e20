"""Pipeline configuration: a flat ``key = value`` text file.

Grammar, one entry per line::

    # comment; a "#" anywhere starts one, including after a value
    key = value

Keys are dotted names from ``DEFAULTS`` plus per-architecture hyperparameter
overrides ``arch.<a|b|c>.<field>``. Values are integers, floats, ``true``/``false``,
``none``, comma-separated lists, or strings (optionally double-quoted).
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .hyperparams import HyperParams

DEFAULTS = {
    "seed": 0,
    "data.root": "data",
    "data.class_dirs": ["notall", "all"],
    "data.image_size": 64,
    "workdir": "work",
    "augment.enabled": True,
    "augment.multiplier": 1,
    "augment.class_targets": None,
    "augment.rotation_deg": 45.0,
    "augment.height_shift": 0.2,
    "augment.width_shift": 0.2,
    "augment.zoom": 0.1,
    "augment.horizontal_flip": True,
    "augment.vertical_flip": True,
    "augment.shear_deg": 20.0,
    "model.units_divisor": 1,
    "train.epochs": 50,
    "train.batch_size": 16,
    "bo.k_init": 5,
    "bo.n_max": 25,
    "bo.epochs": 3,
    "ensemble.M": 5,
    "synth.n_per_class": 500,
}

ARCH_FIELDS = ("units", "optimizer", "learning_rate", "momentum", "dropout_rate")


def _parse_scalar(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] == '"':
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def _parse_value(text: str):
    if "," in text and not text.strip().startswith('"'):
        return [_parse_scalar(p) for p in text.split(",") if p.strip()]
    return _parse_scalar(text)


def parse_text(text: str, source="<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


@dataclass
class PipelineConfig:
    values: dict
    base_dir: Path
    digest: str = ""
    overrides: dict = field(default_factory=dict)  # arch -> {field: value}

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def path(self, key) -> Path:
        p = Path(str(self.values[key]))
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def workdir(self) -> Path:
        return self.path("workdir")

    def hyperparams(self, arch: str, base: HyperParams) -> HyperParams:
        ov = self.overrides.get(arch, {})
        try:
            return base.with_overrides(**ov) if ov else base
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid hyperparameter override for arch {arch}: {e}") from e

    def gru_units(self, h: HyperParams) -> int:
        return max(1, h.units // int(self.values["model.units_divisor"]))


def _coerce(key, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        return value if isinstance(value, list) else [value]
    return str(value)


def _validate(v: dict):
    checks = [
        ("data.image_size", v["data.image_size"] >= 8),
        ("augment.multiplier", v["augment.multiplier"] >= 1),
        ("model.units_divisor", v["model.units_divisor"] >= 1),
        ("train.epochs", v["train.epochs"] >= 0),
        ("train.batch_size", v["train.batch_size"] >= 1),
        ("bo.k_init", v["bo.k_init"] >= 1),
        ("bo.n_max", v["bo.n_max"] > v["bo.k_init"]),
        ("bo.epochs", v["bo.epochs"] >= 1),
        ("ensemble.M", v["ensemble.M"] >= 1),
        ("synth.n_per_class", v["synth.n_per_class"] >= 5),
        ("data.class_dirs", len(v["data.class_dirs"]) == 2),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"{key} = {v[key]!r} is out of range")
    targets = v["augment.class_targets"]
    if targets is not None:
        if not isinstance(targets, list) or len(targets) != 2 or not all(isinstance(t, int) for t in targets):
            raise ConfigError("augment.class_targets must be two integers")


def from_text(text: str, base_dir=".", source="<config>") -> PipelineConfig:
    raw = parse_text(text, source)
    values = dict(DEFAULTS)
    overrides = {}
    for key, value in raw.items():
        if key.startswith("arch."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in ("a", "b", "c") or parts[2] not in ARCH_FIELDS:
                raise ConfigError(f"{source}: unknown override key {key!r}")
            overrides.setdefault(parts[1], {})[parts[2]] = value
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[key] = _coerce(key, value, DEFAULTS[key])
    _validate(values)
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return PipelineConfig(values, Path(base_dir), digest, overrides)


def load(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return from_text(text, base_dir=path.parent, source=str(path))


def default() -> PipelineConfig:
    return from_text("", base_dir=Path.cwd())
