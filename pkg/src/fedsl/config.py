"""Experiment configuration: flat ``key = value`` text files, validated up front."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from fedsl.errors import ConfigError
from fedsl.wireless import (
    DEFAULT_BANDWIDTH_HZ,
    DEFAULT_CLIENT_TX_DBM,
    DEFAULT_NOISE_DBM_PER_HZ,
    DEFAULT_SERVER_TX_DBM,
)


@dataclass
class ExperimentConfig:
    K: int = 5
    T: int = 300
    I: int = 5
    L: int = 4
    L_c: int = 2
    layer_dims: list = field(default_factory=lambda: [16, 32, 32, 8, 3])
    rho_f: float = 0.35
    q: int = 8
    p: float = 0.3
    eta: float = 0.05
    batch: int = 32
    seed: int = 0
    # per-client distances in metres; empty means uniform in [100, 300] m from the seed
    d_meters: list = field(default_factory=list)
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    tx_power_client_dbm: float = DEFAULT_CLIENT_TX_DBM
    tx_power_server_dbm: float = DEFAULT_SERVER_TX_DBM
    noise_dbm_per_hz: float = DEFAULT_NOISE_DBM_PER_HZ
    latency_mode: str = "max"
    server_update: str = "gradient"
    n_train: int = 1000
    n_test: int = 500
    center_scale: float = 1.5
    noise_std: float = 1.0
    snapshot_every: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def validate(self) -> None:
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        for key in ("K", "T", "I", "batch", "n_train", "n_test"):
            need(getattr(self, key) >= 1, key, "must be a positive integer")
        need(len(self.layer_dims) >= 3, "layer_dims", "need at least two layers (three widths)")
        need(all(d >= 1 for d in self.layer_dims), "layer_dims", "widths must be positive")
        need(self.layer_dims[-1] >= 2, "layer_dims", "output width (class count) must be >= 2")
        need(
            self.L == len(self.layer_dims) - 1,
            "L",
            f"must equal len(layer_dims) - 1 = {len(self.layer_dims) - 1}",
        )
        need(1 <= self.L_c < self.L, "L_c", f"split layer must satisfy 1 <= L_c < L = {self.L}")
        need(0.0 <= self.rho_f < 1.0, "rho_f", "final sparsity must lie in [0, 1)")
        need(self.q >= 0, "q", "quantization bits must be >= 1 (0 disables quantization)")
        need(self.q <= 31, "q", "at most 31 bits are supported")
        need(0.0 <= self.p < 1.0, "p", "dropout probability must lie in [0, 1)")
        need(self.eta > 0, "eta", "learning rate must be positive")
        need(self.seed >= 0, "seed", "must be a non-negative integer")
        need(self.n_train >= self.K, "n_train", "every client needs at least one sample")
        if self.d_meters:
            need(len(self.d_meters) == self.K, "d_meters", f"need one distance per client ({self.K})")
            need(all(d > 0 for d in self.d_meters), "d_meters", "distances must be positive")
        need(self.bandwidth_hz > 0, "bandwidth_hz", "must be positive")
        need(self.latency_mode in ("max", "sum"), "latency_mode", "must be 'max' or 'sum'")
        need(
            self.server_update in ("gradient", "replica"),
            "server_update",
            "must be 'gradient' or 'replica'",
        )
        need(self.center_scale >= 0, "center_scale", "must be non-negative")
        need(self.noise_std >= 0, "noise_std", "must be non-negative")
        need(self.snapshot_every >= 0, "snapshot_every", "must be >= 0 (0 disables snapshots)")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _int_list(text):
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _float_list(text):
    return [float(v) for v in text.replace(" ", "").split(",") if v]


_PARSERS = {
    "layer_dims": _int_list,
    "d_meters": _float_list,
    "latency_mode": str,
    "server_update": str,
    "out_dir": str,
}


def _parser_for(f: dataclasses.Field):
    if f.name in _PARSERS:
        return _PARSERS[f.name]
    default = f.default
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int
    return float


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def coerce(key: str, raw):
    """Convert one raw value (string from a file or flag) to the field's type."""
    if key not in FIELDS:
        raise ConfigError(key, "unknown configuration key")
    if not isinstance(raw, str):
        return raw
    try:
        return _parser_for(FIELDS[key])(raw.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None


def read_config_values(text: str) -> dict:
    """Only the keys a config text sets, converted to their field types."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError("<file>", f"malformed config: {exc}") from None
    return {k: coerce(k, v) for k, v in cp["experiment"].items()}


def parse_config_text(text: str, **overrides) -> ExperimentConfig:
    values = read_config_values(text)
    values.update({k: coerce(k, v) for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), **overrides)
