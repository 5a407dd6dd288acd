"""Time-stepping Galerkin solvers.

Three problems share one stepping core:

  * the nonlocal diffusion equation   du/dt + Div_s(Theta_gamma grad_s u) = F,
  * its reduced Schrodinger form      d/dt(gamma^{-1} v) + ((-Delta)^s + Q) v = G,
  * the backward adjoint              -gamma^{-1} dv*/dt + ((-Delta)^s + Q) v* = G,
    v*(T) = 0, solved by reversing the time variable.

Exterior data enters through lifting: the interior unknown is w = u - f and
the right side carries the exactly assembled exterior coupling rows.  All
linear solves are dense direct factorizations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .domain_time import (
    Conductivity,
    DomainSpec,
    Field,
    FracOrder,
    TimeGrid,
    discrete_norms,
    time_reverse,
)
from .kernel_assembly import (
    PotentialField,
    StiffnessSet,
    assemble_weighted_mass,
    assemble_weighted_stiffness,
    conductivity_q,
)

__all__ = [
    "SolveReport",
    "solve_forward_diffusion",
    "solve_reduced_schrodinger",
    "solve_adjoint_backward",
    "liouville_transform",
    "verify_liouville",
]


@dataclass
class SolveReport:
    solution: Field
    energy_lhs: float
    energy_rhs: float
    n_solves: int
    residual_max: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.solution.values)):
            raise ValueError("solver produced non-finite values")
        if self.residual_max > 1e-10:
            raise ValueError(f"linear solve residual too large: {self.residual_max:.3e}")


class _SliceCache:
    """Deduplicate per-time-slice matrix assembly by slice content."""

    def __init__(self, build):
        self._build = build
        self._store: dict[bytes, object] = {}

    def get(self, key_array: np.ndarray):
        key = key_array.tobytes()
        if key not in self._store:
            self._store[key] = self._build(key_array)
        return self._store[key]


class _FactorCache:
    def __init__(self):
        self._store: dict = {}

    def solve(self, key, mat_builder, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve with a factorization cached under ``key``; ``mat_builder``
        is called only on a cache miss.  Returns (solution, matrix)."""
        if key not in self._store:
            mat = mat_builder()
            self._store[key] = (lu_factor(mat), mat)
        fact, mat = self._store[key]
        return lu_solve(fact, rhs), mat


def _relative_residual(mat: np.ndarray, x: np.ndarray, rhs: np.ndarray) -> float:
    scale = np.linalg.norm(rhs)
    if scale == 0:
        return float(np.linalg.norm(mat @ x))
    return float(np.linalg.norm(mat @ x - rhs) / scale)


def _as_initial(u0, spec: DomainSpec) -> np.ndarray:
    if u0 is None:
        return np.zeros(spec.n_nodes)
    if isinstance(u0, Field):
        return u0.values[:, 0].copy()
    arr = np.asarray(u0, dtype=float)
    if arr.shape != (spec.n_nodes,):
        raise ValueError("initial slice has wrong shape")
    return arr.copy()


def _zero_like(spec: DomainSpec, tg: TimeGrid, tag: str) -> Field:
    return Field(np.zeros((spec.n_nodes, tg.n_t + 1)), tag)


def _energy_rhs(f: Field, F: Field, u0: np.ndarray, S: StiffnessSet, tg: TimeGrid) -> float:
    nf = discrete_norms(f, S, tg)
    nF = discrete_norms(F, S, tg)
    dof = S.spec.dof_indices
    m0 = u0[dof] @ (S.M @ u0[dof])
    dfdt = np.gradient(f.values[dof], tg.tau, axis=1)
    dt_l2 = tg.tau * float(np.einsum("ik,ij,jk->", dfdt, S.M, dfdt))
    return (
        nF["l2_space_time"] ** 2
        + nf["l2_space_time"] ** 2
        + nf["hs_seminorm_sq"]
        + dt_l2
        + float(m0)
    )


def solve_forward_diffusion(
    c: Conductivity,
    f: Optional[Field],
    F: Optional[Field],
    u0,
    spec: DomainSpec,
    fo: FracOrder,
    tg: TimeGrid,
    S: StiffnessSet,
) -> SolveReport:
    """Theta-scheme for the nonlocal diffusion equation with exterior data f,
    interior source F and initial slice u0 (u - f is the interior unknown)."""
    if f is None:
        f = _zero_like(spec, tg, "exterior-only")
    if F is None:
        F = _zero_like(spec, tg, "interior-only")
    u0v = _as_initial(u0, spec)
    tau, theta = tg.tau, tg.theta
    dof = spec.dof_indices
    ii = spec.dof_interior
    M, A = S.M, S.A

    qvals = conductivity_q(c, spec, fo, tg)
    kmats: dict[bytes, np.ndarray] = {}

    def stiffness_at(k: int) -> np.ndarray:
        key = c.gamma.values[:, k].tobytes() + qvals[:, k].tobytes()
        if key not in kmats:
            kmats[key] = assemble_weighted_stiffness(
                spec, fo, c, k, A=A, q_slice=qvals[:, k]
            )
        return kmats[key]

    fcache = _FactorCache()

    fvals = f.values[dof]
    Fvals = F.values[dof]
    w = np.zeros((len(dof), tg.n_t + 1))
    w[:, 0] = (u0v[dof] - fvals[:, 0])
    w[~ii, 0] = 0.0

    res_max = 0.0
    for k in range(tg.n_t):
        K_next = stiffness_at(k + 1)
        if theta == 1.0:
            K_step = K_next
            load = M @ Fvals[:, k + 1]
            f_stiff = K_step @ fvals[:, k + 1]
        else:
            K_step = 0.5 * (stiffness_at(k) + K_next)
            load = M @ (0.5 * (Fvals[:, k] + Fvals[:, k + 1]))
            f_stiff = K_step @ (0.5 * (fvals[:, k] + fvals[:, k + 1]))
        rhs_full = load - M @ ((fvals[:, k + 1] - fvals[:, k]) / tau) - f_stiff
        rhs = (M / tau - (1.0 - theta) * K_step) @ w[:, k] + rhs_full
        sys_rhs = rhs[ii]
        sol, sys_mat = fcache.solve(
            id(K_step) if theta == 1.0 else ("cn", k),
            lambda: (M / tau + theta * K_step)[np.ix_(ii, ii)],
            sys_rhs,
        )
        res_max = max(res_max, _relative_residual(sys_mat, sol, sys_rhs))
        w[ii, k + 1] = sol

    u_vals = np.zeros((spec.n_nodes, tg.n_t + 1))
    u_vals[dof] = w + fvals
    u = Field(u_vals, "full")

    w_field = Field(_embed(w, spec), "interior-only")
    n_w = discrete_norms(w_field, S, tg)
    energy_lhs = n_w["linf_l2"] ** 2 + n_w["hs_seminorm_sq"]
    energy_rhs = _energy_rhs(f, F, u0v, S, tg)
    return SolveReport(u, energy_lhs, energy_rhs, tg.n_t, res_max)


def _embed(dof_vals: np.ndarray, spec: DomainSpec) -> np.ndarray:
    out = np.zeros((spec.n_nodes, dof_vals.shape[1]))
    out[spec.dof_indices] = dof_vals
    return out


def _reduced_step_matrices(
    c: Conductivity,
    P: PotentialField,
    spec: DomainSpec,
    S: StiffnessSet,
    extra_potential: Optional[np.ndarray] = None,
):
    """Per-slice weighted masses for the reduced equation.

    Returns two callables: k -> M_{1/gamma}(t_k) and k -> M_Q(t_k).
    M_{1/gamma} is the collocated weighted mass D_{1/w} M D_{1/w} with
    w = gamma^{1/2} at the nodes, the same collocation used by the weighted
    stiffness; this makes the discrete Liouville transform v = D_w u an exact
    intertwining of the two schemes whenever gamma is time-independent.
    ``extra_potential`` (nodes x times) is added to Q (used by the adjoint
    rewrite, where the conservative-form correction shifts the potential).
    """
    inv_gamma = 1.0 / c.gamma.values
    Qv = P.Q.values if P is not None else np.zeros_like(inv_gamma)
    if extra_potential is not None:
        Qv = Qv + extra_potential
    dof = spec.dof_indices
    Mdof = S.M

    def _collocated(sl: np.ndarray) -> np.ndarray:
        invw = np.sqrt(sl[dof])
        return Mdof * np.outer(invw, invw)

    mbar_cache = _SliceCache(_collocated)
    mq_cache = _SliceCache(lambda sl: assemble_weighted_mass(spec, sl))

    def mbar(k: int) -> np.ndarray:
        return mbar_cache.get(inv_gamma[:, k])

    def mq(k: int) -> np.ndarray:
        return mq_cache.get(Qv[:, k])

    return mbar, mq


def solve_reduced_schrodinger(
    c: Conductivity,
    g: Optional[Field],
    G: Optional[Field],
    v0,
    spec: DomainSpec,
    fo: FracOrder,
    tg: TimeGrid,
    S: StiffnessSet,
    P: Optional[PotentialField],
    _extra_potential: Optional[np.ndarray] = None,
) -> SolveReport:
    """Theta-scheme for d/dt(gamma^{-1} v) + ((-Delta)^s + Q) v = G.

    The discrete time derivative acts on the product M_{1/gamma} v, mirroring
    the distributional form of the equation (this preserves the
    summation-by-parts structure the measurement-map identities rely on).
    """
    if g is None:
        g = _zero_like(spec, tg, "exterior-only")
    if G is None:
        G = _zero_like(spec, tg, "interior-only")
    v0v = _as_initial(v0, spec)
    tau, theta = tg.tau, tg.theta
    dof = spec.dof_indices
    ii = spec.dof_interior
    M, A = S.M, S.A
    mbar, mq = _reduced_step_matrices(c, P, spec, S, _extra_potential)
    fcache = _FactorCache()

    gvals = g.values[dof]
    Gvals = G.values[dof]
    w = np.zeros((len(dof), tg.n_t + 1))
    w[:, 0] = v0v[dof] - gvals[:, 0]
    w[~ii, 0] = 0.0

    res_max = 0.0
    for k in range(tg.n_t):
        Mb0, Mb1 = mbar(k), mbar(k + 1)
        if theta == 1.0:
            Mq1 = mq(k + 1)
            rhs = (Mb0 / tau) @ w[:, k]
            load = M @ Gvals[:, k + 1]
            g_terms = (Mb1 @ gvals[:, k + 1] - Mb0 @ gvals[:, k]) / tau \
                + A @ gvals[:, k + 1] + Mq1 @ gvals[:, k + 1]
            key = (id(Mb1), id(Mq1))
            builder = lambda: (Mb1 / tau + A + Mq1)[np.ix_(ii, ii)]  # noqa: E731
        else:
            Cmid = A + 0.5 * (mq(k) + mq(k + 1))
            rhs = (Mb0 / tau) @ w[:, k] - 0.5 * (Cmid @ w[:, k])
            load = M @ (0.5 * (Gvals[:, k] + Gvals[:, k + 1]))
            g_terms = (Mb1 @ gvals[:, k + 1] - Mb0 @ gvals[:, k]) / tau \
                + Cmid @ (0.5 * (gvals[:, k] + gvals[:, k + 1]))
            key = ("cn", k)
            builder = lambda: (Mb1 / tau + 0.5 * Cmid)[np.ix_(ii, ii)]  # noqa: E731
        rhs = rhs + load - g_terms
        sys_rhs = rhs[ii]
        sol, sys_mat = fcache.solve(key, builder, sys_rhs)
        res_max = max(res_max, _relative_residual(sys_mat, sol, sys_rhs))
        w[ii, k + 1] = sol

    v_vals = np.zeros((spec.n_nodes, tg.n_t + 1))
    v_vals[dof] = w + gvals
    v = Field(v_vals, "full")

    w_field = Field(_embed(w, spec), "interior-only")
    n_w = discrete_norms(w_field, S, tg)
    energy_lhs = n_w["linf_l2"] ** 2 + n_w["hs_seminorm_sq"]
    energy_rhs = _energy_rhs(g, G, v0v, S, tg)
    return SolveReport(v, energy_lhs, energy_rhs, tg.n_t, res_max)


def _reversed_conductivity(c: Conductivity, tg: TimeGrid) -> Conductivity:
    gamma_r = time_reverse(c.gamma, tg)
    m_r = time_reverse(c.m, tg)
    dt_r = time_reverse(c.dt_gamma, tg)
    dt_r = Field(-dt_r.values, dt_r.support_tag)
    return Conductivity(gamma=gamma_r, gamma0=c.gamma0, m=m_r, dt_gamma=dt_r)


def solve_adjoint_backward(
    c: Conductivity,
    g: Optional[Field],
    G: Optional[Field],
    spec: DomainSpec,
    fo: FracOrder,
    tg: TimeGrid,
    S: StiffnessSet,
    P: Optional[PotentialField],
) -> SolveReport:
    """Backward problem -gamma^{-1} dv/dt + ((-Delta)^s + Q) v = G, v(T) = 0.

    Solved by time reversal.  In reversed time t' = T - t the equation reads
    gamma'^{-1} dv/dt' + ((-Delta)^s + Q') v = G'; rewriting the first term in
    conservative form d/dt'(gamma'^{-1} v) shifts the potential by
    -d/dt'(gamma'^{-1}) = -(dt gamma / gamma^2)(T - t'), which is passed to
    the reduced solver as an extra potential.
    """
    if g is None:
        g = _zero_like(spec, tg, "exterior-only")
    if G is None:
        G = _zero_like(spec, tg, "interior-only")
    if np.max(np.abs(g.values[:, -1])) > 0:
        raise ValueError("adjoint exterior data must vanish at t = T")
    cr = _reversed_conductivity(c, tg)
    Pr = None
    extra = None
    if P is not None:
        Pr = PotentialField(
            q=time_reverse(P.q, tg),
            Q=time_reverse(P.Q, tg),
        )
        # -d/dt'(gamma'^{-1}) evaluated in reversed time
        extra = -(time_reverse(c.dt_gamma, tg).values) / (cr.gamma.values ** 2)
    gr = time_reverse(g, tg)
    Gr = time_reverse(G, tg)
    rep = solve_reduced_schrodinger(cr, gr, Gr, None, spec, fo, tg, S, Pr,
                                    _extra_potential=extra)
    sol = time_reverse(rep.solution, tg)
    return SolveReport(sol, rep.energy_lhs, rep.energy_rhs, rep.n_solves, rep.residual_max)


def liouville_transform(u: Field, c: Conductivity, direction: str) -> Field:
    """Multiply pointwise by gamma^{1/2} (to_schrodinger) or gamma^{-1/2}."""
    sq = np.sqrt(c.gamma.values)
    if direction == "to_schrodinger":
        vals = u.values * sq
    elif direction == "from_schrodinger":
        vals = u.values / sq
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return Field(vals, u.support_tag)


def verify_liouville(
    c: Conductivity,
    f: Field,
    spec: DomainSpec,
    fo: FracOrder,
    tg: TimeGrid,
    S: StiffnessSet,
    P: PotentialField,
) -> dict:
    """Relative space-time L^2 distance between the reduced solve with data
    gamma^{1/2} f and the transformed diffusion solve."""
    rep_u = solve_forward_diffusion(c, f, None, None, spec, fo, tg, S)
    sq = np.sqrt(c.gamma.values)
    g = Field(sq * f.values, "exterior-only")
    rep_v = solve_reduced_schrodinger(c, g, None, None, spec, fo, tg, S, P)
    v_ref = liouville_transform(rep_u.solution, c, "to_schrodinger")
    diff = Field(rep_v.solution.values - v_ref.values, "full")
    num = discrete_norms(diff, S, tg)["l2_space_time"]
    den = discrete_norms(v_ref, S, tg)["l2_space_time"]
    return {"discrepancy": num / max(den, 1e-300), "norm_ref": den}
