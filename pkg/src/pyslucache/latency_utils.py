from __future__ import annotations

import time
from dataclasses import dataclass
from datetime import timedelta
from enum import Enum

import numpy as np


class Level(str, Enum):
    L1_HIT = "l1_hit"
    L2_HIT = "l2_hit"
    OFFLOAD = "offload"


@dataclass(frozen=True)
class LatencyModel:
    """
    Hit latencies already include the last 10-frame streaming segment; offloads scale with audio duration
    by a clipped-normal real-time factor.
    """

    l1_hit_ms: float = 96.0
    l2_hit_ms: float = 185.0
    rtf_mean: float = 0.30
    rtf_sd: float = 0.033
    rtf_min: float = 0.29 * 0.8
    rtf_max: float = 0.34 * 1.2
    active_power_mw: float = 200.6

    @classmethod
    def from_config(cls, latency_cfg) -> "LatencyModel":
        return cls(
            l1_hit_ms=latency_cfg.l1_hit_ms,
            l2_hit_ms=latency_cfg.l2_hit_ms,
            rtf_mean=latency_cfg.rtf_mean,
            rtf_sd=latency_cfg.rtf_sd,
            rtf_min=latency_cfg.rtf_min,
            rtf_max=latency_cfg.rtf_max,
            active_power_mw=latency_cfg.active_power_mw,
        )

    def sample_rtf(self, rng: np.random.Generator, size: int | None = None):
        return np.clip(rng.normal(self.rtf_mean, self.rtf_sd, size=size), self.rtf_min, self.rtf_max)


def _as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def account_latency(level: Level, duration_s: float, model: LatencyModel, rng: np.random.Generator | int | None = None) -> float:
    """
    Modelled end-to-end latency of one input

    Args:
        - level (Level): Where the input was resolved
        - duration_s (float): Audio duration, only used for offloads
        - model (LatencyModel): Latency constants
        - rng (np.random.Generator | int | None): Generator (or seed) for the offload RTF draw

    Returns:
        - float: Latency in milliseconds
    """

    if level is Level.L1_HIT:
        return model.l1_hit_ms
    if level is Level.L2_HIT:
        return model.l2_hit_ms
    return float(model.sample_rtf(_as_rng(rng)) * duration_s * 1000.0)


def sample_offload_latency(duration_s: float, model: LatencyModel, n: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """n independent offload latencies (ms) for audio of the given duration"""

    return model.sample_rtf(_as_rng(rng), size=n) * duration_s * 1000.0


def account_energy(level: Level, latency_ms: float, model: LatencyModel) -> float:
    """
    Energy in mJ from E = P * t at the active-mode power.

    On-device paths are charged for their latency. An offload is charged for the on-device residual
    (the L2-hit path already run) plus the transmission window, i.e. the rest of the offload latency.
    """

    if level is Level.OFFLOAD:
        window_ms = max(latency_ms - model.l2_hit_ms, 0.0)
        return model.active_power_mw * (model.l2_hit_ms + window_ms) / 1000.0
    return model.active_power_mw * latency_ms / 1000.0


def get_time_dif(start_time: float) -> timedelta:
    """Get the time difference between now and the start time"""

    end_time = time.time()
    time_dif = end_time - start_time
    return timedelta(seconds=int(round(time_dif)))
