"""Forward/adjoint time steppers and the Liouville reduction."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fraclab.domain_time import (
    Field,
    FracOrder,
    TimeGrid,
    constant_conductivity,
    discrete_norms,
    make_conductivity,
    sample,
    time_reverse,
    zero_field,
)
from fraclab.kernel_assembly import assemble_potentials, assemble_stiffness_set
from fraclab.solvers import (
    liouville_transform,
    solve_adjoint_backward,
    solve_forward_diffusion,
    solve_reduced_schrodinger,
    verify_liouville,
)

from conftest import bump_conductivity, standard_domain


def _exterior_data(spec, tg, amp=1.0, center=1.5):
    return sample(
        lambda x, t: amp * math.exp(-10.0 * (x - center) ** 2) * math.sin(math.pi * t / tg.T),
        spec,
        tg,
        tag="exterior-only",
    )


class TestForwardSolver:
    def test_zero_data_gives_zero(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        rep = solve_forward_diffusion(
            const_c, zero_field(spec_coarse, tg16, "exterior-only"), None, None,
            spec_coarse, fo_half, tg16, S_coarse,
        )
        assert not rep.solution.values.any()
        assert rep.residual_max <= 1e-14

    def test_stepping_residual_small(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        f = _exterior_data(spec_coarse, tg16)
        rep = solve_forward_diffusion(const_c, f, None, None, spec_coarse, fo_half, tg16, S_coarse)
        assert rep.residual_max <= 1e-10
        assert rep.n_solves == tg16.n_t

    def test_exterior_trace_matches_data(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        f = _exterior_data(spec_coarse, tg16)
        rep = solve_forward_diffusion(const_c, f, None, None, spec_coarse, fo_half, tg16, S_coarse)
        ext = spec_coarse.exterior_mask
        np.testing.assert_allclose(rep.solution.values[ext], f.values[ext], atol=1e-14)

    def test_energy_estimate(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        f = _exterior_data(spec_coarse, tg16)
        rep = solve_forward_diffusion(const_c, f, None, None, spec_coarse, fo_half, tg16, S_coarse)
        assert rep.energy_lhs >= 0.0
        assert rep.energy_lhs <= 100.0 * rep.energy_rhs

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=10, deadline=None)
    def test_superposition_in_data(self, seed):
        spec = standard_domain(0.1)
        fo = FracOrder(0.5, 1)
        tg = TimeGrid(1.0, 6)
        S = assemble_stiffness_set(spec, fo)
        c = constant_conductivity(1.0, spec, tg)
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-2.0, 2.0, size=2)
        f1 = _exterior_data(spec, tg, amp=1.0, center=1.5)
        f2 = _exterior_data(spec, tg, amp=1.0, center=-1.5)
        mix = Field(a * f1.values + b * f2.values, "exterior-only")
        u1 = solve_forward_diffusion(c, f1, None, None, spec, fo, tg, S).solution.values
        u2 = solve_forward_diffusion(c, f2, None, None, spec, fo, tg, S).solution.values
        u12 = solve_forward_diffusion(c, mix, None, None, spec, fo, tg, S).solution.values
        np.testing.assert_allclose(u12, a * u1 + b * u2, atol=1e-12)

    def test_steady_state_half_sphere(self):
        # gamma = 1, unit interior source: u(T) approaches (1-x^2)^{1/2}_+
        spec = standard_domain(0.05)
        fo = FracOrder(0.5, 1)
        tg = TimeGrid(8.0, 160)
        S = assemble_stiffness_set(spec, fo)
        c = constant_conductivity(1.0, spec, tg)
        F = sample(lambda x, t: 1.0, spec, tg, tag="interior-only")
        rep = solve_forward_diffusion(c, None, F, None, spec, fo, tg, S)
        target = np.sqrt(np.clip(1.0 - spec.nodes**2, 0.0, None))
        diff = rep.solution.values[:, -1] - target
        mask = spec.interior_mask
        err = math.sqrt(spec.h * float(np.sum(diff[mask] ** 2)))
        assert err <= 5e-2


class TestReducedSolver:
    def test_zero_data_gives_zero(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        P = assemble_potentials(const_c, spec_coarse, fo_half, tg16)
        rep = solve_reduced_schrodinger(
            const_c, zero_field(spec_coarse, tg16, "exterior-only"), None, None,
            spec_coarse, fo_half, tg16, S_coarse, P,
        )
        assert not rep.solution.values.any()

    def test_matches_forward_for_constant_gamma(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        # gamma = 1: the reduction is the identity, both solvers must agree
        P = assemble_potentials(const_c, spec_coarse, fo_half, tg16)
        f = _exterior_data(spec_coarse, tg16)
        u = solve_forward_diffusion(const_c, f, None, None, spec_coarse, fo_half, tg16, S_coarse)
        v = solve_reduced_schrodinger(const_c, f, None, None, spec_coarse, fo_half, tg16, S_coarse, P)
        np.testing.assert_allclose(u.solution.values, v.solution.values, atol=1e-12)


class TestAdjointSolver:
    def test_zero_data_gives_zero(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        P = assemble_potentials(const_c, spec_coarse, fo_half, tg16)
        rep = solve_adjoint_backward(
            const_c, zero_field(spec_coarse, tg16, "exterior-only"), None,
            spec_coarse, fo_half, tg16, S_coarse, P,
        )
        assert not rep.solution.values.any()

    def test_reduces_to_time_reversal_for_constant_gamma(
        self, spec_coarse, fo_half, tg16, S_coarse, const_c
    ):
        # static gamma: the adjoint solve is the forward reduced solve on
        # time-reversed data, reversed back
        P = assemble_potentials(const_c, spec_coarse, fo_half, tg16)
        g = sample(
            lambda x, t: math.exp(-10.0 * (x + 1.5) ** 2) * t * (1.0 - t / tg16.T) ** 2,
            spec_coarse,
            tg16,
            tag="exterior-only",
        )
        adj = solve_adjoint_backward(const_c, g, None, spec_coarse, fo_half, tg16, S_coarse, P)
        fwd = solve_reduced_schrodinger(
            const_c, time_reverse(g, tg16), None, None,
            spec_coarse, fo_half, tg16, S_coarse, P,
        )
        np.testing.assert_allclose(
            adj.solution.values, time_reverse(fwd.solution, tg16).values, atol=1e-13
        )


class TestLiouville:
    def test_transform_roundtrip(self, spec_coarse, tg16):
        c = bump_conductivity(spec_coarse, tg16)
        u = sample(lambda x, t: math.cos(x) * (1.0 + t), spec_coarse, tg16)
        v = liouville_transform(u, c, "to_schrodinger")
        w = liouville_transform(v, c, "from_schrodinger")
        np.testing.assert_allclose(w.values, u.values, atol=1e-14)

    def test_unknown_direction(self, spec_coarse, tg16, const_c):
        u = zero_field(spec_coarse, tg16)
        with pytest.raises(ValueError):
            liouville_transform(u, const_c, "sideways")

    def test_constant_one(self, spec_coarse, fo_half, tg16, S_coarse, const_c):
        P = assemble_potentials(const_c, spec_coarse, fo_half, tg16)
        f = _exterior_data(spec_coarse, tg16)
        out = verify_liouville(const_c, f, spec_coarse, fo_half, tg16, S_coarse, P)
        assert out["discrepancy"] <= 1e-12

    def test_constant_four(self, spec_coarse, fo_half, tg16, S_coarse):
        c = constant_conductivity(4.0, spec_coarse, tg16)
        P = assemble_potentials(c, spec_coarse, fo_half, tg16)
        f = _exterior_data(spec_coarse, tg16)
        out = verify_liouville(c, f, spec_coarse, fo_half, tg16, S_coarse, P)
        assert out["discrepancy"] <= 1e-10

    def test_static_bump_intertwines_exactly(self, spec_coarse, fo_half, tg16, S_coarse):
        c = bump_conductivity(spec_coarse, tg16, amplitude=0.4)
        P = assemble_potentials(c, spec_coarse, fo_half, tg16)
        f = _exterior_data(spec_coarse, tg16)
        out = verify_liouville(c, f, spec_coarse, fo_half, tg16, S_coarse, P)
        assert out["discrepancy"] <= 1e-10

    def test_time_dependent_first_order_rate(self):
        # smooth space-time coefficient: discrepancy decays at first order
        spec = standard_domain(0.1)
        fo = FracOrder(0.5, 1)
        S = assemble_stiffness_set(spec, fo)
        T = 1.0

        def gamma_fn(x, t):
            return 1.0 + 0.25 * math.exp(-(x * x) / 0.1) * (1.0 + t / T)

        def dt_gamma_fn(x, t):
            return 0.25 * math.exp(-(x * x) / 0.1) / T

        vals = []
        for n_t in (8, 16, 32):
            tg = TimeGrid(T, n_t)
            c = make_conductivity(gamma_fn, spec, tg, dt_gamma_fn=dt_gamma_fn)
            P = assemble_potentials(c, spec, fo, tg)
            f = _exterior_data(spec, tg)
            vals.append(verify_liouville(c, f, spec, fo, tg, S, P)["discrepancy"])
        assert vals[0] / vals[1] >= 1.5
        assert vals[1] / vals[2] >= 1.5
