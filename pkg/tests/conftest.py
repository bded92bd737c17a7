import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from tilewatt.hwmodel import MHZ, GpuConfig, PowerConfig, load_config

FIXTURES = Path(__file__).parent / "fixtures"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def a100():
    return load_config("A100-PCIE")


@pytest.fixture(scope="session")
def gpu(a100):
    return a100[0]


@pytest.fixture(scope="session")
def power(a100):
    return a100[1]


def toy_gpu(**changes):
    """Round-number device so expected values can be worked out by hand."""
    base = dict(name="toy", num_sms=4, dram_bandwidth=1e12, l2_bandwidth=4e12, shared_bandwidth_per_sm=1e12,
                tensor_core_flops={"bf16": 1e15}, cuda_core_flops={"fp32": 1e14, "bf16": 2e14},
                sfu_ops=1e13, reference_core_freq=1000 * MHZ, dram_freq=1000 * MHZ, dram_voltage=1.0)
    base.update(changes)
    return GpuConfig(**base)


def toy_power(freq_mhz=1000, volt=1.0, **changes):
    base = dict(core_freq=freq_mhz * MHZ, core_voltage=volt, idle_power_table=((500 * MHZ, 30.0), (1500 * MHZ, 50.0)))
    base.update(changes)
    return PowerConfig(**base)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def store(gpu, power):
    """Coefficients fitted on a small synthetic database with the default hidden truth."""
    import warnings

    from tilewatt.db import generate_synthetic_database
    from tilewatt.store import fit_store

    recs = generate_synthetic_database(0, gpu, power, shapes_per_group=20)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_store(recs, gpu, power).store


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
