"""Shared fixtures: the expensive default-scale scenarios are built once."""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from bsmsentinel.evaluate import run_pipeline
from bsmsentinel.simulate import (
    AttackSpec,
    KIND_DOS,
    ScenarioConfig,
    apply_attacks,
    generate_baseline,
    vehicles_covering,
)


@pytest.fixture(scope="session")
def default_dos_run():
    """Default 200 s scenario with one 1000 msg/s DoS attacker over 10 s,
    plus the pipeline result and wall-clock timings."""
    scenario = ScenarioConfig()
    rng = np.random.default_rng(scenario.seed)
    t0 = time.perf_counter()
    baseline = generate_baseline(scenario, rng)
    onset, attack_len = 100.0, 10.0
    target = min(vehicles_covering(baseline, onset, onset + attack_len))
    spec = AttackSpec(
        kind=KIND_DOS, target_vehicle=target, onset=onset,
        duration=attack_len, rate=1000.0,
    )
    trace = apply_attacks(baseline, [spec], rng)
    generation_wall = time.perf_counter() - t0

    t0 = time.perf_counter()
    log, report = run_pipeline(trace)
    pipeline_wall = time.perf_counter() - t0

    return SimpleNamespace(
        scenario=scenario,
        spec=spec,
        baseline=baseline,
        trace=trace,
        log=log,
        report=report,
        generation_wall=generation_wall,
        pipeline_wall=pipeline_wall,
    )


@pytest.fixture(scope="session")
def small_scenario():
    """A 60 s scenario sized for per-test attack injection."""
    scenario = ScenarioConfig(duration=60.0)
    rng = np.random.default_rng(scenario.seed)
    baseline = generate_baseline(scenario, rng)
    covering = sorted(vehicles_covering(baseline, 30.0, 45.0))
    assert len(covering) >= 4
    return SimpleNamespace(scenario=scenario, baseline=baseline, covering=covering)
