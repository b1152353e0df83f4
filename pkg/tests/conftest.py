from __future__ import annotations

import pytest

from sdmkit.experiment import DeskConfig, prepare_desk
from sdmkit.synth import WorldSpec

# filled by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def small_desk_config(**overrides) -> DeskConfig:
    """A downsized desk world that trains every model in a few seconds."""
    base = dict(world=WorldSpec(nrows=48, ncols=48, n_species=8), n_occurrences=900, epochs=10,
                cooc_epochs=10, val_every=2, milestones=())
    base.update(overrides)
    return DeskConfig(**base)


@pytest.fixture(scope="session")
def small_desk():
    cfg = small_desk_config()
    return cfg, prepare_desk(cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
