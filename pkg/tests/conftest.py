"""Shared fixtures for the fraclab test suite."""

from __future__ import annotations

import math

import numpy as np
import pytest

from fraclab.domain_time import (
    DomainSpec,
    FracOrder,
    TimeGrid,
    build_domain,
    constant_conductivity,
    make_conductivity,
)
from fraclab.kernel_assembly import StiffnessSet, assemble_stiffness_set


def standard_domain(h: float, L: float = 2.0) -> DomainSpec:
    return build_domain(
        {
            "L": L,
            "h": h,
            "omega": [-1.0, 1.0],
            "exterior_sets": {"W1": [-1.8, -1.2], "W2": [1.2, 1.8]},
        }
    )


def bump(y):
    """Smooth compactly supported bump, equal exp(-1/(1-y^2)) for |y| < 1."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - y[inside] ** 2))
    return out if out.ndim else float(out)


def bump_conductivity(spec, tg, amplitude=0.4, radius=0.5, center=0.0):
    e = math.exp(1.0)

    def gamma_fn(x, t):
        return 1.0 + amplitude * e * float(bump(np.array([(x - center) / radius]))[0])

    return make_conductivity(gamma_fn, spec, tg, dt_gamma_fn=lambda x, t: 0.0)


@pytest.fixture(scope="session")
def fo_half() -> FracOrder:
    return FracOrder(0.5, 1)


@pytest.fixture(scope="session")
def spec_coarse() -> DomainSpec:
    return standard_domain(0.05)


@pytest.fixture(scope="session")
def S_coarse(spec_coarse, fo_half) -> StiffnessSet:
    return assemble_stiffness_set(spec_coarse, fo_half)


@pytest.fixture(scope="session")
def tg16() -> TimeGrid:
    return TimeGrid(1.0, 16)


@pytest.fixture(scope="session")
def const_c(spec_coarse, tg16):
    return constant_conductivity(1.0, spec_coarse, tg16)
