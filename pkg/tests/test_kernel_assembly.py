"""Kernel constant, stiffness assembly and pointwise operator checks.

Reference values below were computed independently with mpmath at 30
significant digits:

* kernel constants from 4^s * Gamma(n/2 + s) / (pi^{n/2} * |Gamma(-s)|);
* Toeplitz coefficients from the Fourier-side representation
  J_k = (1/pi) * int_0^inf u^{2s} * sinc^4(u/2) * cos(k u) du,
  evaluated with pi-length panels on [0, 80*pi] plus an analytic tail
  (incomplete-gamma closed form for each oscillatory component).
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fraclab.domain_time import FracOrder, TimeGrid, constant_conductivity, sample
from fraclab.kernel_assembly import (
    assemble_mass,
    assemble_stiffness_set,
    assemble_weighted_mass,
    conductivity_q,
    frac_laplacian_pointwise,
    kernel_constant,
    read_matrix_cache,
    tail_values,
    toeplitz_coefficients,
    write_matrix_cache,
)

from conftest import bump_conductivity, standard_domain

# 4^s Gamma(n/2+s) / (pi^{n/2} |Gamma(-s)|), mpmath, 30 digits
KERNEL_CONSTANTS = {
    (1, 0.5): 1.0 / math.pi,
    (2, 0.5): 1.0 / (2.0 * math.pi),
    (1, 0.3): 0.230096381681632105,
    (1, 0.75): 0.299206710301074508,
    (2, 0.25): 0.0832419838754250655,
}

# Fourier-side oracle J_k, k = 0..6 (see module docstring)
TOEPLITZ_ORACLE = {
    0.5: [
        0.882542400610606374,
        -0.191438614673943746,
        -0.116787941914831389,
        -0.0401361076225988752,
        -0.0212703186312225398,
        -0.0132747817542826432,
        -0.00909835644963285403,
    ],
    0.3: [
        0.72934141059028503,
        -0.0415213278217762998,
        -0.0971953986274645499,
        -0.0432541292913326319,
        -0.0262180724795759825,
        -0.0180327553080313284,
        -0.0133490176162812518,
    ],
    0.75: [
        1.24637321202724837,
        -0.469392255007988434,
        -0.098912715822339537,
        -0.0231630806980556376,
        -0.0103173604794100351,
        -0.00569003308252517772,
        -0.00353807459309379224,
    ],
}


class TestKernelConstant:
    @pytest.mark.parametrize("key", sorted(KERNEL_CONSTANTS))
    def test_against_gamma_formula(self, key):
        n, s = key
        got = kernel_constant(FracOrder(s, n)).value
        assert got == pytest.approx(KERNEL_CONSTANTS[key], rel=1e-12)

    @given(s=st.floats(0.05, 0.95))
    @settings(max_examples=40, deadline=None)
    def test_positive_and_finite(self, s):
        v = kernel_constant(FracOrder(s, 1)).value
        assert math.isfinite(v) and v > 0.0


class TestToeplitzCoefficients:
    @pytest.mark.parametrize("s", sorted(TOEPLITZ_ORACLE))
    def test_fourier_oracle(self, s):
        ours = toeplitz_coefficients(s, 8)
        ref = TOEPLITZ_ORACLE[s]
        for k, r in enumerate(ref):
            assert ours[k] == pytest.approx(r, rel=1e-10), f"lag {k}"

    def test_off_diagonal_sign_and_decay(self):
        j = toeplitz_coefficients(0.5, 30)
        assert j[0] > 0.0
        assert np.all(j[1:] < 0.0)
        assert np.all(np.abs(j[5:]) < np.abs(j[4]))


class TestStiffnessAssembly:
    def test_toeplitz_structure_and_scaling(self):
        spec = standard_domain(0.1)
        fo = FracOrder(0.5, 1)
        S = assemble_stiffness_set(spec, fo)
        A = S.A
        assert A.shape == (spec.n_dof, spec.n_dof)
        np.testing.assert_allclose(A, A.T, atol=1e-15)
        j = toeplitz_coefficients(fo.s, spec.n_dof)
        scale = spec.h ** (1.0 - 2.0 * fo.s)
        for k in range(spec.n_dof):
            band = np.diagonal(A, offset=k)
            np.testing.assert_allclose(band, scale * j[k], rtol=1e-12)

    def test_positive_definite(self):
        spec = standard_domain(0.1)
        S = assemble_stiffness_set(spec, FracOrder(0.4, 1))
        w = np.linalg.eigvalsh(S.A)
        assert w.min() > 0.0
        assert S.coercivity_constant(S.A) > 0.0

    def test_mass_matrix_row_sums(self):
        spec = standard_domain(0.1)
        M = assemble_mass(spec)
        # P1 mass row sums integrate the hat functions: h away from boundary
        sums = M.sum(axis=1)
        np.testing.assert_allclose(sums[1:-1], spec.h, rtol=1e-12)

    def test_weighted_mass_matches_mass_for_unit_weight(self):
        spec = standard_domain(0.1)
        Mw = assemble_weighted_mass(spec, np.ones(spec.n_nodes))
        np.testing.assert_allclose(Mw, assemble_mass(spec), rtol=1e-12)

    def test_tail_values_positive_near_boundary(self):
        spec = standard_domain(0.1)
        z = tail_values(spec, FracOrder(0.5, 1))
        assert z.shape == (spec.n_dof,)
        assert np.all(z >= 0.0)
        assert z[0] > z[spec.n_dof // 2]


class TestPointwiseOperator:
    def test_torsion_identity_coarse(self):
        # closed form: the operator of order 1/2 applied to the half-sphere
        # profile (1 - x^2)^{1/2}_+ is constant 1 inside (-1, 1)
        spec = standard_domain(0.02)
        fo = FracOrder(0.5, 1)
        tg = TimeGrid(1.0, 1)
        m = sample(
            lambda x, t: math.sqrt(max(0.0, 1.0 - x * x)),
            spec,
            tg,
            tag="interior-only",
        )
        lap = frac_laplacian_pointwise(m, spec, fo, tg)
        inner = np.abs(spec.nodes) < 1.0 - 1e-12
        err = np.max(np.abs(lap.values[inner, 0] - 1.0))
        assert err <= 1e-6

    def test_constant_gamma_gives_zero_potential(self):
        spec = standard_domain(0.1)
        tg = TimeGrid(1.0, 4)
        c = constant_conductivity(1.0, spec, tg)
        q = conductivity_q(c, spec, FracOrder(0.5, 1), tg)
        np.testing.assert_allclose(q, 0.0, atol=1e-14)

    def test_bump_gamma_potential_supported_in_omega(self):
        spec = standard_domain(0.1)
        tg = TimeGrid(1.0, 2)
        c = bump_conductivity(spec, tg, amplitude=0.3)
        q = conductivity_q(c, spec, FracOrder(0.5, 1), tg)
        assert np.max(np.abs(q)) > 0.0
        assert np.all(np.isfinite(q))


class TestMatrixCache:
    def test_roundtrip(self, tmp_path):
        spec = standard_domain(0.1)
        fo = FracOrder(0.5, 1)
        A = assemble_stiffness_set(spec, fo).A
        path = tmp_path / "A.fdck"
        write_matrix_cache(path, A, fo, spec)
        back = read_matrix_cache(path, fo, spec)
        np.testing.assert_array_equal(back, A)

    def test_parameter_mismatch_returns_none(self, tmp_path):
        spec = standard_domain(0.1)
        fo = FracOrder(0.5, 1)
        A = assemble_stiffness_set(spec, fo).A
        path = tmp_path / "A.fdck"
        write_matrix_cache(path, A, fo, spec)
        assert read_matrix_cache(path, FracOrder(0.4, 1), spec) is None
        other = standard_domain(0.2)
        assert read_matrix_cache(path, fo, other) is None

    def test_truncated_file_returns_none(self, tmp_path):
        spec = standard_domain(0.1)
        fo = FracOrder(0.5, 1)
        A = assemble_stiffness_set(spec, fo).A
        path = tmp_path / "A.fdck"
        write_matrix_cache(path, A, fo, spec)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        assert read_matrix_cache(path, fo, spec) is None

    def test_missing_file_returns_none(self, tmp_path):
        spec = standard_domain(0.1)
        assert read_matrix_cache(tmp_path / "nope.fdck", FracOrder(0.5, 1), spec) is None
