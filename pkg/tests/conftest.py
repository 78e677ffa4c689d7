import time
from pathlib import Path

import pytest

from enduro.simulator import load_scenario, run_race

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "enduro" / "scenarios"
ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request, capsys):
    """Record one pass/fail line for an acceptance criterion and echo it immediately."""

    def record(name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


@pytest.fixture(scope="session")
def scenario_dir():
    return SCENARIOS


@pytest.fixture(scope="session")
def synthetic20():
    return load_scenario(SCENARIOS / "synthetic20.toml")


@pytest.fixture(scope="session")
def toy_scenario():
    return load_scenario(SCENARIOS / "toy.toml")


@pytest.fixture(scope="session")
def toy():
    from oracles import toy_maps
    return toy_maps()


@pytest.fixture(scope="session")
def race_logs(synthetic20):
    """Both policies on the bundled 20-lap scenario, with wall times."""
    out = {}
    for policy in ("optimal", "baseline"):
        t0 = time.perf_counter()
        lg = run_race(synthetic20, policy)
        out[policy] = (lg, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def free_flow(synthetic20):
    """The bundled scenario with the field removed."""
    from dataclasses import replace
    sc = replace(synthetic20, competitors=[])
    return sc, run_race(sc, "optimal")
