import sys

import numpy as np
import pytest

from quadvio.cli_io import parse_config_text


@pytest.fixture(scope="session")
def short_log():
    """A 12 s default-trajectory log shared by pipeline tests."""
    cfg = parse_config_text("duration = 12\nsim.seed = 5")
    from quadvio.sim import run_simulation
    return cfg, run_simulation(cfg.sim, cfg.segments(), cfg.duration)


def start_state(log):
    tr = log.truth
    return np.r_[tr.position[0], tr.theta[0], tr.velocity[0], np.zeros(6)]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", {})
    lines = [(int(k.split()[1]), k, v) for k, v in results.items() if k.split()[1].isdigit()]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, name, (ok, detail) in sorted(lines):
        terminalreporter.write_line(f"{name:<12} {'PASS' if ok else 'FAIL'}  {detail}")
