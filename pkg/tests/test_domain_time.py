"""Grid/domain bookkeeping, field containers and time-axis utilities."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fraclab.domain_time import (
    Field,
    FracOrder,
    TimeGrid,
    apply_support,
    build_domain,
    constant_conductivity,
    make_conductivity,
    sample,
    time_reverse,
    zero_field,
)

from conftest import standard_domain


class TestDomainSpec:
    def test_node_layout(self):
        spec = standard_domain(0.1)
        assert spec.n_nodes == 41
        assert spec.n_dof == 39
        np.testing.assert_allclose(spec.nodes[0], -2.0)
        np.testing.assert_allclose(spec.nodes[-1], 2.0)
        np.testing.assert_allclose(np.diff(spec.nodes), 0.1)

    def test_masks_partition_nodes(self):
        spec = standard_domain(0.05)
        # interior (open omega) and exterior masks never overlap; only the
        # boundary nodes of omega and of the box belong to neither
        assert not np.any(spec.interior_mask & spec.exterior_mask)
        left_over = spec.nodes[~(spec.interior_mask | spec.exterior_mask)]
        np.testing.assert_allclose(np.sort(left_over), [-2.0, -1.0, 1.0, 2.0])
        x = spec.nodes[spec.interior_mask]
        assert x.min() > -1.0 and x.max() < 1.0

    def test_set_mask_open_interval(self):
        spec = standard_domain(0.1)
        m = spec.set_mask("W2")
        x = spec.nodes[m]
        assert x.min() > 1.2 and x.max() < 1.8

    def test_unsnapped_endpoint_rejected(self):
        with pytest.raises(ValueError, match="snap"):
            build_domain(
                {
                    "L": 2.0,
                    "h": 0.1,
                    "omega": [-1.03, 1.0],
                    "exterior_sets": {"W1": [-1.8, -1.2]},
                }
            )

    def test_insufficient_padding_rejected(self):
        with pytest.raises(ValueError, match="padding"):
            build_domain(
                {
                    "L": 1.1,
                    "h": 0.1,
                    "omega": [-1.0, 1.0],
                    "exterior_sets": {},
                }
            )

    def test_exterior_set_overlapping_omega_rejected(self):
        with pytest.raises(ValueError, match="overlaps"):
            build_domain(
                {
                    "L": 2.0,
                    "h": 0.1,
                    "omega": [-1.0, 1.0],
                    "exterior_sets": {"B": [0.5, 1.5]},
                }
            )


class TestTimeGrid:
    def test_times_and_tau(self):
        tg = TimeGrid(2.0, 8)
        assert tg.tau == pytest.approx(0.25)
        np.testing.assert_allclose(tg.times, np.linspace(0.0, 2.0, 9))

    def test_invalid_theta(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 4, theta=0.7)


class TestFracOrder:
    def test_subcritical_flag(self):
        assert FracOrder(0.25, 1).subcritical
        assert not FracOrder(0.5, 1).subcritical

    def test_range_check(self):
        with pytest.raises(ValueError):
            FracOrder(1.0, 1)


class TestFields:
    def test_sample_shapes(self):
        spec = standard_domain(0.2)
        tg = TimeGrid(1.0, 4)
        f = sample(lambda x, t: x * t, spec, tg)
        assert f.values.shape == (spec.n_nodes, 5)
        np.testing.assert_allclose(f.values[:, 0], 0.0)

    def test_sample_enforces_support(self):
        spec = standard_domain(0.2)
        tg = TimeGrid(1.0, 4)
        f = sample(lambda x, t: 1.0 + t, spec, tg, tag="exterior-only")
        assert np.all(f.values[spec.interior_mask] == 0.0)
        g = sample(lambda x, t: 1.0 + t, spec, tg, tag="interior-only")
        assert np.all(g.values[spec.exterior_mask] == 0.0)

    def test_non_finite_rejected(self):
        spec = standard_domain(0.2)
        tg = TimeGrid(1.0, 2)
        with pytest.raises(ValueError):
            Field(np.full((spec.n_nodes, 3), np.nan), "full")

    @given(
        seed=st.integers(0, 2**31 - 1),
        n_t=st.integers(1, 12),
    )
    @settings(max_examples=25, deadline=None)
    def test_time_reverse_involution_and_isometry(self, seed, n_t):
        spec = standard_domain(0.2)
        tg = TimeGrid(1.0, n_t)
        rng = np.random.default_rng(seed)
        u = Field(rng.standard_normal((spec.n_nodes, n_t + 1)), "full")
        v = time_reverse(u, tg)
        w = time_reverse(v, tg)
        np.testing.assert_array_equal(w.values, u.values)
        # reversal permutes time slices, so every slice-wise norm is preserved
        np.testing.assert_allclose(
            np.sort(np.linalg.norm(v.values, axis=0)),
            np.sort(np.linalg.norm(u.values, axis=0)),
        )

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_apply_support_idempotent(self, seed):
        spec = standard_domain(0.2)
        rng = np.random.default_rng(seed)
        vals = rng.standard_normal((spec.n_nodes, 3))
        once = apply_support(vals, spec, "exterior-only")
        twice = apply_support(once, spec, "exterior-only")
        np.testing.assert_array_equal(once, twice)
        assert np.all(once[spec.interior_mask] == 0.0)

    def test_zero_field(self):
        spec = standard_domain(0.2)
        tg = TimeGrid(1.0, 3)
        z = zero_field(spec, tg)
        assert not z.values.any()


class TestConductivity:
    def test_constant_background(self):
        spec = standard_domain(0.1)
        tg = TimeGrid(1.0, 4)
        c = constant_conductivity(1.0, spec, tg)
        assert c.time_independent
        np.testing.assert_array_equal(c.gamma.values, 1.0)
        np.testing.assert_array_equal(c.m.values, 0.0)

    def test_m_matches_sqrt_gamma(self):
        spec = standard_domain(0.1)
        tg = TimeGrid(1.0, 4)
        c = make_conductivity(lambda x, t: 1.0 + 0.5 * np.exp(-x * x), spec, tg,
                              dt_gamma_fn=lambda x, t: 0.0)
        np.testing.assert_allclose(
            c.m.values + 1.0, np.sqrt(c.gamma.values), atol=1e-13
        )

    def test_ellipticity_violation_rejected(self):
        spec = standard_domain(0.1)
        tg = TimeGrid(1.0, 2)
        with pytest.raises(ValueError, match="ellipticity"):
            make_conductivity(lambda x, t: 3.0, spec, tg, gamma0=0.5)
