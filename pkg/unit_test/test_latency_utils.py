import time
from datetime import timedelta

import numpy as np
import pytest

from pyslucache import load_config
from pyslucache.latency_utils import LatencyModel, Level, account_energy, account_latency, get_time_dif, sample_offload_latency


class TestLatency:
    """Test modelled latencies"""

    def test_hit_latencies(self):
        """Hits cost a fixed 96 ms or 185 ms whatever the duration"""
        model = LatencyModel()
        assert account_latency(Level.L1_HIT, 10.0, model) == 96.0
        assert account_latency(Level.L2_HIT, 0.5, model) == 185.0

    def test_offload_distribution(self):
        """A 3 s offload averages about 900 ms with a spread near 100 ms"""
        samples = sample_offload_latency(3.0, LatencyModel(), 100_000, rng=0)
        assert 880 <= samples.mean() <= 920
        assert 80 <= samples.std() <= 120

    def test_offload_rtf_clipped(self):
        """The real-time factor never leaves its clip range"""
        model = LatencyModel()
        samples = sample_offload_latency(1.0, model, 100_000, rng=1) / 1000.0
        assert samples.min() >= model.rtf_min
        assert samples.max() <= model.rtf_max

    def test_offload_seeded(self):
        """Integer seeds reproduce the draw"""
        model = LatencyModel()
        assert account_latency(Level.OFFLOAD, 2.0, model, 7) == account_latency(Level.OFFLOAD, 2.0, model, 7)

    def test_from_config(self):
        """Config values flow into the model"""
        config = load_config(overrides={"latency": {"l1_hit_ms": 50.0}})
        assert LatencyModel.from_config(config.latency).l1_hit_ms == 50.0


class TestEnergy:
    """Test energy accounting"""

    def test_hit_energy(self):
        """E = P * t at 200.6 mW"""
        model = LatencyModel()
        assert account_energy(Level.L1_HIT, 96.0, model) == pytest.approx(19.2576)
        assert account_energy(Level.L2_HIT, 185.0, model) == pytest.approx(37.0, abs=1.0)
        assert account_energy(Level.L1_HIT, 0.0, model) == 0.0

    def test_offload_energy(self):
        """Offloads pay the on-device path plus the transmission window"""
        model = LatencyModel()
        latencies = sample_offload_latency(3.0, model, 10_000, rng=2)
        energies = np.array([account_energy(Level.OFFLOAD, lat, model) for lat in latencies])
        assert energies.mean() == pytest.approx(180.0, abs=5.0)
        assert account_energy(Level.OFFLOAD, 100.0, model) == pytest.approx(200.6 * 185.0 / 1000)


class TestTimeDif:
    """Test the wall-clock helper"""

    def test_rounds_to_seconds(self):
        """Elapsed time is a whole-second timedelta"""
        assert get_time_dif(time.time() - 2.4) == timedelta(seconds=2)
        assert get_time_dif(time.time()) == timedelta(seconds=0)
