"""Flat ``key = value`` configuration text with dotted section keys.

Example::

    data.path = scenes/checker
    model.family = vm
    model.resolution = 24x24x24
    mip.scales = 4
    train.iterations = 3000
    train.upsample = 800:40x40x40

Lines starting with ``#`` are comments. Unknown keys are rejected by name.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .train import TrainConfig


class ConfigError(ValueError):
    """Bad configuration text; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _ints(text):
    return tuple(int(v) for v in _split(text))


def _floats(text):
    return tuple(float(v) for v in _split(text))


def _split(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _resolution(text):
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"expected HxWxL, got {text!r}")
    return tuple(int(p) for p in parts)


def _schedule(text):
    out = []
    for item in _split(text):
        it, res = item.split(":")
        out.append((int(it), _resolution(res)))
    return tuple(out)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _fmt_res(r):
    return "x".join(str(int(v)) for v in r)


def _join(vals):
    return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals)


# dotted key -> (TrainConfig attribute, parser, formatter)
KEYS = {
    "data.path": ("data_path", str, str),
    "data.factors": ("factors", _ints, _join),
    "render.background": ("background", float, repr),
    "data.near": ("near", float, repr),
    "data.far": ("far", float, repr),
    "model.family": ("family", str, str),
    "model.resolution": ("resolution", _resolution, _fmt_res),
    "model.density_rank": ("density_rank", int, str),
    "model.appearance_rank": ("appearance_rank", int, str),
    "model.appearance_channels": ("appearance_channels", int, str),
    "model.hidden": ("hidden", int, str),
    "model.bound": ("bound", float, repr),
    "model.density_shift": ("density_shift", float, repr),
    "mip.scales": ("scales", int, str),
    "mip.kernel_size": ("kernel_size", int, str),
    "mip.stdevs": ("stdevs", _floats, _join),
    "mip.learn_kernels": ("learn_kernels", _bool, lambda v: "true" if v else "false"),
    "scale_coord.kind": ("scale_kind", str, str),
    "scale_coord.anchors": ("anchors", _floats, _join),
    "scale_coord.secondary_anchors": ("secondary_anchors", _floats, _join),
    "scale_coord.reference_distance": ("reference_distance", float, repr),
    "train.iterations": ("iterations", int, str),
    "train.batch_rays": ("batch_rays", int, str),
    "train.n_samples": ("n_samples", int, str),
    "train.lr_grid": ("lr_grid", float, repr),
    "train.lr_kernel": ("lr_kernel", float, repr),
    "train.lr_decoder": ("lr_decoder", float, repr),
    "train.lr_decay": ("lr_decay", float, repr),
    "train.upsample": ("upsample", _schedule, lambda v: ",".join(f"{i}:{_fmt_res(r)}" for i, r in v)),
    "train.kernel_start_iteration": ("kernel_start_iteration", int, str),
    "train.loss_weights": ("loss_weights", _floats, _join),
    "train.seed": ("seed", int, str),
    "train.log_every": ("log_every", int, str),
    "eval.every": ("eval_every", int, str),
    "eval.views": ("eval_views", int, str),
    "eval.samples": ("eval_samples", int, str),
}

ATTR_TO_KEY = {attr: key for key, (attr, _, _) in KEYS.items()}
assert set(ATTR_TO_KEY) == {f.name for f in fields(TrainConfig)}


def parse_values(text: str) -> dict:
    """Parse config text into ``{dotted key: raw string}`` (last assignment wins)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'", key)
        out[key] = value
    return out


def apply_values(values: dict, base: TrainConfig = None) -> TrainConfig:
    """Overlay parsed ``{key: raw}`` values on ``base`` (defaults when omitted)."""
    changes = {}
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key '{key}'", key)
        attr, parse, _ = KEYS[key]
        try:
            changes[attr] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}", key) from exc
    try:
        return (base or TrainConfig()).replace(**changes)
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def loads(text: str, base: TrainConfig = None) -> TrainConfig:
    return apply_values(parse_values(text), base)


def load(path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from exc
    return loads(text)


def dumps(cfg: TrainConfig) -> str:
    """Serialize every field; ``loads(dumps(c)) == c``."""
    lines = []
    for key, (attr, _, fmt) in KEYS.items():
        lines.append(f"{key} = {fmt(getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"
