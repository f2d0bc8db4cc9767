import math
from functools import lru_cache

import pytest

from capserrin.geometry import CapSpec, make_cap_domain, make_chord_domain, make_half_disk, perturbed_cap_domain
from capserrin.torsion import solve_torsion

CAP = CapSpec(math.pi / 2, 0.25)
CAP_TILTED = CapSpec(math.pi / 3, 0.15)


@lru_cache(maxsize=None)
def domain(name: str):
    if name == "cap":
        return make_cap_domain(CAP, 0.005)
    if name == "cap_tilted":
        return make_cap_domain(CAP_TILTED, 0.005)
    if name == "cap_small":
        return make_cap_domain(CapSpec(math.pi / 2, 0.1), 0.005)
    if name == "perturbed":
        return perturbed_cap_domain(CAP, 0.10, mode=2, boundary_spacing=0.005)
    if name == "perturbed5":
        return perturbed_cap_domain(CAP, 0.05, mode=2, boundary_spacing=0.005)
    if name == "chord":
        return make_chord_domain(0.3, 0.005)
    if name == "half_disk":
        return make_half_disk(0.005)
    raise KeyError(name)


@lru_cache(maxsize=None)
def solved(name: str, h: float):
    return solve_torsion(domain(name), h)


# Every domain the suite solves on; the half disk is only used where the
# problem stays meaningful (it is not coercive in the continuum limit).
SUITE_DOMAINS = ("cap", "cap_tilted", "cap_small", "perturbed", "perturbed5", "chord", "half_disk")


@pytest.fixture
def cap_spec():
    return CAP


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
