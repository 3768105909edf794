"""Link budget and Shannon-rate latency model for the client/server subchannels."""
from __future__ import annotations

import math
from dataclasses import dataclass

from fedsl.errors import InputError

DEFAULT_BANDWIDTH_HZ = 5e6
DEFAULT_CLIENT_TX_DBM = 23.0
DEFAULT_SERVER_TX_DBM = 37.0
DEFAULT_NOISE_DBM_PER_HZ = -174.0


@dataclass(frozen=True)
class LinkParams:
    distance_km: float
    tx_power_dbm: float
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    noise_dbm_per_hz: float = DEFAULT_NOISE_DBM_PER_HZ

    def __post_init__(self):
        if not self.distance_km > 0:
            raise InputError(f"distance must be positive, got {self.distance_km} km")
        if not self.bandwidth_hz > 0:
            raise InputError(f"bandwidth must be positive, got {self.bandwidth_hz} Hz")


def path_loss_db(distance_km: float) -> float:
    """Macro-cell path loss ``128.1 + 37.6 log10(d)`` with ``d`` in kilometres."""
    if not distance_km > 0:
        raise InputError(f"distance must be positive, got {distance_km} km")
    return 128.1 + 37.6 * math.log10(distance_km)


def noise_power_dbm(params: LinkParams) -> float:
    return params.noise_dbm_per_hz + 10.0 * math.log10(params.bandwidth_hz)


def snr_db(params: LinkParams) -> float:
    rx_dbm = params.tx_power_dbm - path_loss_db(params.distance_km)
    return rx_dbm - noise_power_dbm(params)


def link_rate(params: LinkParams) -> float:
    """Shannon rate ``B log2(1 + SNR)`` in bit/s."""
    return params.bandwidth_hz * math.log2(1.0 + 10.0 ** (snr_db(params) / 10.0))


def latency(n_bytes: int, rate_bps: float) -> float:
    if not rate_bps > 0:
        raise InputError(f"rate must be positive, got {rate_bps}")
    if n_bytes < 0:
        raise InputError(f"byte count must be non-negative, got {n_bytes}")
    return 8.0 * n_bytes / rate_bps


def round_latency(uplink_s, downlink_s, mode: str = "max") -> float:
    """Communication time of one round.

    ``max``: clients use dedicated subchannels, so the slowest uplink and the
    slowest downlink bound the round. ``sum``: links are served one after another.
    """
    uplink_s = list(uplink_s)
    downlink_s = list(downlink_s)
    if mode == "max":
        return max(uplink_s, default=0.0) + max(downlink_s, default=0.0)
    if mode == "sum":
        return math.fsum(uplink_s) + math.fsum(downlink_s)
    raise InputError(f"unknown latency mode {mode!r} (expected 'max' or 'sum')")
