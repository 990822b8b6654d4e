"""Flat `key = value` run configuration covering the network, training, and
raster settings. Unknown keys are rejected; every value is validated at parse
time. The canonical network text embedded in checkpoints round-trips through
the same grammar."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError
from .network import NetworkConfig
from .scenes import RasterConfig
from .training import TrainConfig


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"config key {key!r}: expected an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"config key {key!r}: expected a number, got {raw!r}") from None


def _parse_int3(key: str, raw: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ValidationError(f"config key {key!r}: expected 3 comma-separated integers, got {raw!r}")
    return tuple(_parse_int(key, p) for p in parts)


def _parse_optimizer(key: str, raw: str) -> str:
    if raw not in ("sgd", "adam"):
        raise ValidationError(f"config key {key!r}: expected 'sgd' or 'adam', got {raw!r}")
    return raw


_NETWORK_KEYS = {
    "raster_size": _parse_int,
    "in_channels": _parse_int,
    "stem_channels": _parse_int3,
    "stage_depths": _parse_int3,
    "stage_channels": _parse_int3,
    "heads": _parse_int3,
    "kv_reduction_stride": _parse_int,
    "ffn_expansion": _parse_int,
    "lstm_hidden": _parse_int,
    "waypoints": _parse_int,
}

_TRAIN_KEYS = {
    "epochs": _parse_int,
    "learning_rate": _parse_float,
    "optimizer": _parse_optimizer,
    "seed": _parse_int,
    "yaw_loss_weight": _parse_float,
    "sample_stride": _parse_int,
    "grad_clip": _parse_float,
}

_RASTER_KEYS = {
    "resolution": _parse_float,
}


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    raster: RasterConfig


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(int(x)) for x in v)
    return str(v)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse `key = value` lines; blank lines and # comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not key:
            raise ValidationError(f"config line {lineno}: empty key")
        if key in out:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = raw
    return out


def parse_run_config(text: str) -> RunConfig:
    """Build a RunConfig from flat text; keys not present keep their defaults."""
    pairs = parse_key_values(text)
    net = NetworkConfig()
    train = TrainConfig()
    raster = RasterConfig()
    for key, raw in pairs.items():
        if key in _NETWORK_KEYS:
            setattr(net, key, _NETWORK_KEYS[key](key, raw))
        elif key in _TRAIN_KEYS:
            setattr(train, key, _TRAIN_KEYS[key](key, raw))
        elif key in _RASTER_KEYS:
            setattr(raster, key, _RASTER_KEYS[key](key, raw))
        else:
            raise ValidationError(f"unknown config key {key!r}")
    raster.size = net.raster_size
    net.validate()
    train.validate()
    raster.validate()
    return RunConfig(network=net, train=train, raster=raster)


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def canonical_network_text(cfg: NetworkConfig) -> str:
    """Deterministic `key = value` rendering of a network config."""
    lines = [f"{key} = {_fmt_value(getattr(cfg, key))}" for key in _NETWORK_KEYS]
    return "\n".join(lines) + "\n"


def parse_network_text(text: str) -> NetworkConfig:
    """Parse the canonical network text (all keys required)."""
    pairs = parse_key_values(text)
    missing = set(_NETWORK_KEYS) - set(pairs)
    extra = set(pairs) - set(_NETWORK_KEYS)
    if missing:
        raise ValidationError(f"network config text missing keys: {sorted(missing)}")
    if extra:
        raise ValidationError(f"network config text has unknown keys: {sorted(extra)}")
    cfg = NetworkConfig(**{k: _NETWORK_KEYS[k](k, pairs[k]) for k in _NETWORK_KEYS})
    cfg.validate()
    return cfg
