"""Exterior measurement operators and their consistency identities.

Four Gram matrices over exterior basis functions are computed:

  * Lambda_gamma -- the space-time Dirichlet form of the diffusion solution
    paired with test functions (full weighted stiffness),
  * N_gamma      -- the same form with the kernel restricted to index pairs
    that are not both exterior (masked weighted stiffness),
  * N_Q          -- the exterior map of the reduced Schrodinger equation
    (masked unweighted stiffness on the reduced solution),
  * N_Q_adjoint  -- its adjoint, built from the backward solver.

The masked matrices are the full assembled matrices with exterior x exterior
entries zeroed, so the partition Lambda = N_gamma + (ext x ext term) holds
entrywise at the discrete level.  The representation formulas pair the
discrete scheme residual against extensions of the test function; the time
quadrature uses the right endpoint for the forward maps and the left endpoint
for the adjoint map, which makes the self-adjointness identity exact algebra
for time-independent coefficients.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import IntegrationWarning, quad as _scipy_quad


def quad(*args, **kwargs):
    """scipy.integrate.quad with convergence chatter silenced (the accuracy
    of the returned values is checked by the oracle tests, not the warnings)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        return _scipy_quad(*args, **kwargs)

from .domain_time import (
    Conductivity,
    DomainSpec,
    Field,
    FracOrder,
    TimeGrid,
    sample,
)
from .kernel_assembly import (
    PotentialField,
    StiffnessSet,
    assemble_weighted_mass,
    assemble_weighted_stiffness,
    conductivity_q,
    kernel_constant,
)
from .solvers import (
    _reduced_step_matrices,
    solve_adjoint_backward,
    solve_forward_diffusion,
    solve_reduced_schrodinger,
)

__all__ = [
    "ExteriorBasis",
    "DNMatrix",
    "make_exterior_basis",
    "dn_lambda",
    "neumann_N_gamma",
    "exterior_exterior_term",
    "dn_N_Q",
    "dn_N_Q_adjoint",
    "check_selfadjoint",
    "check_old_new_equivalence",
    "check_relation_theorem",
    "integration_by_parts_check",
    "dn_to_csv",
]


# ---------------------------------------------------------------------------
# Exterior basis functions
# ---------------------------------------------------------------------------


def _bump(y: float) -> float:
    if abs(y) >= 1.0:
        return 0.0
    return math.exp(-1.0 / (1.0 - y * y))


@dataclass
class ExteriorBasis:
    """A finite family of exterior-only space-time test functions.

    Each member is compactly supported in the named exterior set and
    vanishes at both time endpoints, so the same basis is admissible for the
    forward maps (data vanishing at t = 0) and the adjoint map (data
    vanishing at t = T).
    """

    fields: list
    labels: list
    set_name: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.fields) != len(self.labels):
            raise ValueError("labels and fields must pair up")

    def __len__(self) -> int:
        return len(self.fields)

    def validate(self, spec: DomainSpec, tg: TimeGrid) -> None:
        inside = spec.set_mask(self.set_name, open_interval=False)
        for f, lab in zip(self.fields, self.labels):
            vals = f.values
            if vals.shape != (spec.n_nodes, tg.n_t + 1):
                raise ValueError(f"basis member {lab!r} has wrong shape")
            if np.max(np.abs(vals[~inside])) > 0:
                raise ValueError(f"basis member {lab!r} leaves its declared set")
            if np.max(np.abs(vals[spec.interior_mask])) > 0:
                raise ValueError(f"basis member {lab!r} does not vanish on omega")
            if np.max(np.abs(vals[:, 0])) > 0:
                raise ValueError(f"basis member {lab!r} does not vanish at t = 0")


def make_exterior_basis(
    spec: DomainSpec,
    tg: TimeGrid,
    set_name: str,
    n_space: int = 6,
    n_time: int = 5,
    normalize: bool = False,
    S=None,
) -> ExteriorBasis:
    """Tensor basis of smooth bumps: n_space spatial x n_time temporal.

    With ``normalize`` the members are scaled to unit discrete space-time
    L^2 norm (tau-weighted mass form; requires the stiffness set for its
    mass matrix), which puts measurement Gram matrices on a common scale.
    """
    if normalize and S is None:
        raise ValueError("normalization needs the stiffness set for the mass matrix")
    w0, w1 = spec.exterior_sets[set_name]
    rx = (w1 - w0) / (n_space + 1)
    rt = tg.T / (n_time + 1)
    fields, labels = [], []
    for i in range(n_space):
        cx = w0 + (i + 1) * rx
        for j in range(n_time):
            ct = (j + 1) * rt

            def expr(x, t, cx=cx, ct=ct):
                return _bump((x - cx) / rx) * _bump((t - ct) / rt)

            fld = sample(expr, spec, tg, tag="exterior-only")
            if normalize:
                vals = fld.values[spec.dof_indices]
                nrm = math.sqrt(tg.tau * float(np.sum((S.M @ vals) * vals)))
                fld.values = fld.values / nrm
                scale = 1.0 / nrm

                def expr_n(x, t, e=expr, s=scale):
                    return s * e(x, t)

                fld.expr = expr_n
            fields.append(fld)
            labels.append(f"{set_name}:x{i}t{j}")
    basis = ExteriorBasis(fields=fields, labels=labels, set_name=set_name,
                          meta={"n_space": n_space, "n_time": n_time})
    basis.validate(spec, tg)
    return basis


# ---------------------------------------------------------------------------
# DN matrices
# ---------------------------------------------------------------------------

_KINDS = ("lambda", "N_gamma", "N_Q", "N_Q_adjoint")


@dataclass
class DNMatrix:
    """Sampled bilinear measurement data over basis pairs."""

    entries: np.ndarray  # (len(fb), len(gb))
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.kind not in _KINDS:
            raise ValueError(f"unknown DN matrix kind {self.kind!r}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("DN matrix has non-finite entries")


def _hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def _dn_meta(c: Conductivity, spec: DomainSpec, fb: ExteriorBasis, gb: ExteriorBasis) -> dict:
    return {
        "gamma_hash": _hash(np.ascontiguousarray(c.gamma.values).tobytes()),
        "grid_hash": _hash(spec.content_key()),
        "row_labels": list(fb.labels),
        "col_labels": list(gb.labels),
    }


def _ext_pair_mask(spec: DomainSpec) -> np.ndarray:
    e = spec.dof_exterior
    return np.outer(e, e)


def _weighted_stiffness_slices(c, spec, fo, tg, S):
    """Per-time-slice weighted stiffness matrices, deduplicated by content."""
    qvals = conductivity_q(c, spec, fo, tg)
    store: dict[bytes, np.ndarray] = {}
    mats = []
    for k in range(tg.n_t + 1):
        key = c.gamma.values[:, k].tobytes() + qvals[:, k].tobytes()
        if key not in store:
            store[key] = assemble_weighted_stiffness(
                spec, fo, c, k, A=S.A, q_slice=qvals[:, k]
            )
        mats.append(store[key])
    return mats


def _forward_diffusion_columns(c, fb, spec, fo, tg, S):
    out = []
    for f in fb.fields:
        rep = solve_forward_diffusion(c, f, None, None, spec, fo, tg, S)
        out.append(rep.solution.values[spec.dof_indices])
    return out


def _lambda_like(c, fb, gb, spec, fo, tg, S, masked, solutions=None):
    fb.validate(spec, tg)
    gb.validate(spec, tg)
    Ks = _weighted_stiffness_slices(c, spec, fo, tg, S)
    if masked:
        ee = _ext_pair_mask(spec)
        Ks = [np.where(ee, 0.0, K) for K in Ks]
    if solutions is None:
        solutions = _forward_diffusion_columns(c, fb, spec, fo, tg, S)
    gcols = [g.values[spec.dof_indices] for g in gb.fields]
    tau = tg.tau
    entries = np.zeros((len(fb), len(gb)))
    for k in range(1, tg.n_t + 1):
        Gk = np.column_stack([g[:, k] for g in gcols])
        KG = Ks[k] @ Gk
        Uk = np.column_stack([u[:, k] for u in solutions])
        entries += tau * (Uk.T @ KG)
    return entries, solutions


def dn_lambda(c, fb, gb, spec, fo, tg, S, solutions=None) -> DNMatrix:
    """<Lambda_gamma f_i, g_j>: time-summed full weighted Dirichlet form."""
    entries, _ = _lambda_like(c, fb, gb, spec, fo, tg, S, masked=False,
                              solutions=solutions)
    return DNMatrix(entries, "lambda", _dn_meta(c, spec, fb, gb))


def neumann_N_gamma(c, fb, gb, spec, fo, tg, S, solutions=None) -> DNMatrix:
    """<N_gamma f_i, g_j>: the same form with ext x ext index pairs removed."""
    entries, _ = _lambda_like(c, fb, gb, spec, fo, tg, S, masked=True,
                              solutions=solutions)
    return DNMatrix(entries, "N_gamma", _dn_meta(c, spec, fb, gb))


def exterior_exterior_term(c, fb, gb, spec, fo, tg, S) -> np.ndarray:
    """The ext x ext block of the weighted form, evaluated on the data pairs
    (the solution equals the data there, so no solve is needed)."""
    Ks = _weighted_stiffness_slices(c, spec, fo, tg, S)
    ee = _ext_pair_mask(spec)
    fcols = [f.values[spec.dof_indices] for f in fb.fields]
    gcols = [g.values[spec.dof_indices] for g in gb.fields]
    tau = tg.tau
    entries = np.zeros((len(fb), len(gb)))
    for k in range(1, tg.n_t + 1):
        Kee = np.where(ee, Ks[k], 0.0)
        Gk = np.column_stack([g[:, k] for g in gcols])
        Fk = np.column_stack([f[:, k] for f in fcols])
        entries += tau * (Fk.T @ (Kee @ Gk))
    return entries


# ---------------------------------------------------------------------------
# Reduced-equation DN maps
# ---------------------------------------------------------------------------


def _mask_split(A: np.ndarray, spec: DomainSpec):
    ee = _ext_pair_mask(spec)
    return np.where(ee, 0.0, A), np.where(ee, A, 0.0)


def _reduced_columns(c, fb, spec, fo, tg, S, P):
    out = []
    for f in fb.fields:
        rep = solve_reduced_schrodinger(c, f, None, None, spec, fo, tg, S, P)
        out.append(rep.solution.values[spec.dof_indices])
    return out


def _adjoint_columns(c, fb, spec, fo, tg, S, P):
    out = []
    for f in fb.fields:
        rep = solve_adjoint_backward(c, f, None, spec, fo, tg, S, P)
        out.append(rep.solution.values[spec.dof_indices])
    return out


def dn_N_Q(
    c,
    P: PotentialField,
    fb,
    gb,
    spec,
    fo,
    tg,
    S,
    method: str = "representation",
    extensions=None,
    solutions=None,
) -> DNMatrix:
    """<N_{Q_gamma} f_i, g_j> from the reduced Schrodinger solutions.

    ``method="direct"`` evaluates the masked unweighted kernel form on the
    solution; ``method="representation"`` pairs the discrete scheme residual
    with an extension of g (default: the zero-in-omega extension, i.e. g
    itself).  ``extensions`` may supply alternative extension arrays
    (nodes x times, one per g); the value is extension-independent because
    interior perturbations pair against the vanishing scheme residual.
    """
    fb.validate(spec, tg)
    gb.validate(spec, tg)
    if solutions is None:
        solutions = _reduced_columns(c, fb, spec, fo, tg, S, P)
    A_mask, A_ee = _mask_split(S.A, spec)
    gcols = [g.values[spec.dof_indices] for g in gb.fields]
    fcols = [f.values[spec.dof_indices] for f in fb.fields]
    tau = tg.tau
    entries = np.zeros((len(fb), len(gb)))

    if method == "direct":
        for k in range(1, tg.n_t + 1):
            Gk = np.column_stack([g[:, k] for g in gcols])
            Vk = np.column_stack([v[:, k] for v in solutions])
            entries += tau * (Vk.T @ (A_mask @ Gk))
        return DNMatrix(entries, "N_Q", _dn_meta(c, spec, fb, gb))
    if method != "representation":
        raise ValueError(f"unknown method {method!r}")

    if extensions is None:
        ext_cols = gcols
    else:
        ext_cols = [np.asarray(e, dtype=float)[spec.dof_indices]
                    if np.asarray(e).shape[0] == spec.n_nodes else np.asarray(e, dtype=float)
                    for e in extensions]
    mbar, mq = _reduced_step_matrices(c, P, spec, S)
    ii = spec.dof_interior
    for k in range(tg.n_t):
        Mb0, Mb1, Mq1 = mbar(k), mbar(k + 1), mq(k + 1)
        Vk = np.column_stack([v[:, k] for v in solutions])
        Vk1 = np.column_stack([v[:, k + 1] for v in solutions])
        # scheme-residual rows, paired over the omega rows only
        R = (Mb1 @ Vk1 - Mb0 @ Vk) + tau * (Mq1 @ Vk1)
        Ek1 = np.column_stack([e[:, k + 1] for e in ext_cols])
        entries += R[ii].T @ Ek1[ii]
        entries += tau * (Vk1.T @ (S.A @ Ek1))
        Gk1 = np.column_stack([g[:, k + 1] for g in gcols])
        Fk1 = np.column_stack([f[:, k + 1] for f in fcols])
        entries -= tau * (Fk1.T @ (A_ee @ Gk1))
    return DNMatrix(entries, "N_Q", _dn_meta(c, spec, fb, gb))


def dn_N_Q_adjoint(
    c,
    P: PotentialField,
    fb,
    gb,
    spec,
    fo,
    tg,
    S,
    method: str = "representation",
    extensions=None,
    solutions=None,
) -> DNMatrix:
    """<N*_{Q_gamma} f_i, g_j> from the backward adjoint solutions.

    Mirrors dn_N_Q with the left-endpoint time quadrature (the reversal
    image of the forward right-endpoint rule).  Requires the f basis to
    vanish at t = T.
    """
    fb.validate(spec, tg)
    gb.validate(spec, tg)
    for f, lab in zip(fb.fields, fb.labels):
        if np.max(np.abs(f.values[:, -1])) > 0:
            raise ValueError(f"adjoint basis member {lab!r} does not vanish at t = T")
    if solutions is None:
        solutions = _adjoint_columns(c, fb, spec, fo, tg, S, P)
    A_mask, A_ee = _mask_split(S.A, spec)
    gcols = [g.values[spec.dof_indices] for g in gb.fields]
    fcols = [f.values[spec.dof_indices] for f in fb.fields]
    tau = tg.tau
    entries = np.zeros((len(fb), len(gb)))

    if method == "direct":
        for k in range(tg.n_t):
            Gk = np.column_stack([g[:, k] for g in gcols])
            Uk = np.column_stack([u[:, k] for u in solutions])
            entries += tau * (Uk.T @ (A_mask @ Gk))
        return DNMatrix(entries, "N_Q_adjoint", _dn_meta(c, spec, fb, gb))
    if method != "representation":
        raise ValueError(f"unknown method {method!r}")

    if extensions is None:
        ext_cols = gcols
    else:
        ext_cols = [np.asarray(e, dtype=float)[spec.dof_indices]
                    if np.asarray(e).shape[0] == spec.n_nodes else np.asarray(e, dtype=float)
                    for e in extensions]
    # effective potential of the backward equation in conservative form
    qtilde = (P.Q.values - c.dt_gamma.values / (c.gamma.values ** 2)
              if P is not None else -c.dt_gamma.values / (c.gamma.values ** 2))
    mbar, _ = _reduced_step_matrices(c, P, spec, S)
    mq_store: dict[bytes, np.ndarray] = {}

    def mqt(k: int) -> np.ndarray:
        key = qtilde[:, k].tobytes()
        if key not in mq_store:
            mq_store[key] = assemble_weighted_mass(spec, qtilde[:, k])
        return mq_store[key]

    ii = spec.dof_interior
    for k in range(tg.n_t):
        Mb0, Mb1, Mqk = mbar(k), mbar(k + 1), mqt(k)
        Uk = np.column_stack([u[:, k] for u in solutions])
        Uk1 = np.column_stack([u[:, k + 1] for u in solutions])
        R = -(Mb1 @ Uk1 - Mb0 @ Uk) + tau * (Mqk @ Uk)
        Ek = np.column_stack([e[:, k] for e in ext_cols])
        entries += R[ii].T @ Ek[ii]
        entries += tau * (Uk.T @ (S.A @ Ek))
        Gk = np.column_stack([g[:, k] for g in gcols])
        Fk = np.column_stack([f[:, k] for f in fcols])
        entries -= tau * (Fk.T @ (A_ee @ Gk))
    return DNMatrix(entries, "N_Q_adjoint", _dn_meta(c, spec, fb, gb))


def check_selfadjoint(c, P, fb, gb, spec, fo, tg, S) -> float:
    """max_ij |<N* f_i, g_j> - <N g_j, f_i>| over the basis block."""
    n_star = dn_N_Q_adjoint(c, P, fb, gb, spec, fo, tg, S, method="direct")
    n_fwd = dn_N_Q(c, P, gb, fb, spec, fo, tg, S, method="direct")
    return float(np.max(np.abs(n_star.entries - n_fwd.entries.T)))


# ---------------------------------------------------------------------------
# Consistency identities
# ---------------------------------------------------------------------------


def _require_equal_on_sets(c1, c2, spec, names) -> None:
    for name in names:
        mask = spec.set_mask(name, open_interval=False)
        if np.max(np.abs(c1.gamma.values[mask] - c2.gamma.values[mask])) > 1e-12:
            raise ValueError(f"conductivities differ on exterior set {name!r}")


def _require_disjoint(spec, name1, name2) -> None:
    m1 = spec.set_mask(name1, open_interval=False)
    m2 = spec.set_mask(name2, open_interval=False)
    if np.any(m1 & m2):
        raise ValueError(f"exterior sets {name1!r} and {name2!r} overlap")


def check_old_new_equivalence(c1, c2, fb, gb, spec, fo, tg, S, tol: float = 1e-9) -> dict:
    """Difference blocks of Lambda and N_gamma for two conductivities that
    agree on the (disjoint) measurement sets; the gap between the two
    difference norms is bounded by the ext x ext correction difference."""
    _require_disjoint(spec, fb.set_name, gb.set_name)
    _require_equal_on_sets(c1, c2, spec, (fb.set_name, gb.set_name))
    lam1 = dn_lambda(c1, fb, gb, spec, fo, tg, S).entries
    lam2 = dn_lambda(c2, fb, gb, spec, fo, tg, S).entries
    n1 = neumann_N_gamma(c1, fb, gb, spec, fo, tg, S).entries
    n2 = neumann_N_gamma(c2, fb, gb, spec, fo, tg, S).entries
    corr1 = exterior_exterior_term(c1, fb, gb, spec, fo, tg, S)
    corr2 = exterior_exterior_term(c2, fb, gb, spec, fo, tg, S)
    lambda_gap = float(np.max(np.abs(lam1 - lam2)))
    n_gap = float(np.max(np.abs(n1 - n2)))
    correction = float(np.max(np.abs(corr1 - corr2)))
    if abs(lambda_gap - n_gap) > correction + tol:
        raise AssertionError(
            f"old/new DN equivalence violated: |{lambda_gap:.3e} - {n_gap:.3e}| "
            f"> {correction:.3e} + {tol:.1e}"
        )
    return {"lambda_gap": lambda_gap, "N_gap": n_gap, "correction": correction}


def _warn_if_rough(g: Conductivity, spec: DomainSpec, names) -> None:
    vals = g.gamma.values
    for name in names:
        mask = spec.set_mask(name, open_interval=False)
        sub = vals[mask]
        if sub.shape[0] < 3:
            continue
        d2 = np.abs(sub[2:] - 2 * sub[1:-1] + sub[:-2])
        scale = max(np.max(np.abs(sub)), 1.0)
        if np.max(d2) > 0.5 * scale:
            warnings.warn(
                f"reference conductivity looks non-smooth on {name!r}; "
                "running the relation check anyway",
                RuntimeWarning,
            )


def check_relation_theorem(c1, c2, big_gamma: Conductivity, fb, gb, spec, fo, tg, S) -> dict:
    """Compare the N_gamma difference block with the N_Q difference block on
    the transformed data (Gamma^{1/2} f, Gamma^{1/2} g)."""
    from .kernel_assembly import assemble_potentials

    _require_disjoint(spec, fb.set_name, gb.set_name)
    _require_equal_on_sets(c1, c2, spec, (fb.set_name, gb.set_name))
    _require_equal_on_sets(c1, big_gamma, spec, (fb.set_name, gb.set_name))
    _warn_if_rough(big_gamma, spec, (fb.set_name, gb.set_name))

    sq = np.sqrt(big_gamma.gamma.values)
    fb_t = ExteriorBasis(
        fields=[Field(sq * f.values, "exterior-only") for f in fb.fields],
        labels=list(fb.labels),
        set_name=fb.set_name,
    )
    gb_t = ExteriorBasis(
        fields=[Field(sq * g.values, "exterior-only") for g in gb.fields],
        labels=list(gb.labels),
        set_name=gb.set_name,
    )
    n1 = neumann_N_gamma(c1, fb, gb, spec, fo, tg, S).entries
    n2 = neumann_N_gamma(c2, fb, gb, spec, fo, tg, S).entries
    P1 = assemble_potentials(c1, spec, fo, tg)
    P2 = assemble_potentials(c2, spec, fo, tg)
    nq1 = dn_N_Q(c1, P1, fb_t, gb_t, spec, fo, tg, S, method="direct").entries
    nq2 = dn_N_Q(c2, P2, fb_t, gb_t, spec, fo, tg, S, method="direct").entries
    d_n = n1 - n2
    d_nq = nq1 - nq2
    return {
        "N_gap": float(np.max(np.abs(d_n))),
        "NQ_gap": float(np.max(np.abs(d_nq))),
        "agreement": float(np.max(np.abs(d_n - d_nq))),
    }


# ---------------------------------------------------------------------------
# Strong-form integration by parts (single time slice)
# ---------------------------------------------------------------------------


def _slice_callable(u: Field, spec: DomainSpec, t: float):
    expr = u.expr
    if expr is None:
        raise ValueError("integration-by-parts check needs fields with generating callables")
    L = spec.L

    def fn(x: float) -> float:
        if x <= -L or x >= L:
            return 0.0
        return float(expr(x, t))

    return fn


def integration_by_parts_check(
    u: Field,
    v: Field,
    c: Conductivity,
    spec: DomainSpec,
    fo: FracOrder,
    t: float = 0.0,
) -> float:
    """Residual of the nonlocal Gauss identity at one time slice.

    The masked two-point form of (u, v) is integrated directly (iterated
    adaptive quadrature of the symmetric kernel) and compared with the sum
    of the strong conductivity operator paired with v over omega and the
    nonlocal Neumann derivative paired with v over the exterior.
    """
    C = kernel_constant(fo).value
    s = fo.s
    L = spec.L
    a, b = spec.omega
    ufun = _slice_callable(u, spec, t)
    vfun = _slice_callable(v, spec, t)
    gexpr = c.gamma.expr
    if gexpr is None:
        raise ValueError("conductivity must carry its generating callable")

    def w(x: float) -> float:
        return math.sqrt(float(gexpr(x, t)))

    def kernel_pair(x: float, y: float) -> float:
        return (w(x) * w(y) * (ufun(x) - ufun(y)) * (vfun(x) - vfun(y))
                / abs(x - y) ** (1.0 + 2.0 * s))

    def inner_full(x: float) -> float:
        # integral over all y of the symmetric two-point integrand
        pieces = 0.0
        for lo, hi in ((-L, x), (x, L)):
            if hi - lo > 1e-14:
                val, _ = quad(lambda y: kernel_pair(x, y), lo, hi, limit=200,
                              epsabs=1e-11, epsrel=1e-10,
                              points=[p for p in (a, b) if lo < p < hi] or None)
                pieces += val
        # beyond the box u = v = 0, so the integrand reduces to the tail of
        # u(x) v(x) w(x) w(y) |x-y|^{-1-2s}
        uvw = ufun(x) * vfun(x) * w(x)
        if uvw != 0.0:
            for lo, hi in ((L, np.inf), (-np.inf, -L)):
                val, _ = quad(lambda y: uvw * w(y) * abs(x - y) ** (-1.0 - 2.0 * s),
                              lo, hi, limit=200, epsabs=1e-11, epsrel=1e-10)
                pieces += val
        return pieces

    def inner_omega(x: float) -> float:
        pieces = 0.0
        for lo, hi in ((a, x), (x, b)):
            if hi - lo > 1e-14:
                val, _ = quad(lambda y: kernel_pair(x, y), lo, hi, limit=200,
                              epsabs=1e-11, epsrel=1e-10)
                pieces += val
        return pieces

    lhs_full, _ = quad(inner_full, a, b, limit=200, epsabs=1e-9, epsrel=1e-9)
    lhs_omega, _ = quad(inner_omega, a, b, limit=200, epsabs=1e-9, epsrel=1e-9)
    masked_form = C * lhs_full - 0.5 * C * lhs_omega

    def strong_op(x: float) -> float:
        # C w(x) \int w(y) (u(x) - u(y)) |x-y|^{-1-2s} dy, symmetrized in z
        ux = ufun(x)

        def integrand(z: float) -> float:
            return ((w(x + z) * (ux - ufun(x + z)) + w(x - z) * (ux - ufun(x - z)))
                    * z ** (-1.0 - 2.0 * s))

        pts = sorted({abs(p - x) for p in (a, b, -L, L)})
        zmax = L + abs(x)
        val, _ = quad(integrand, 0.0, zmax, points=[p for p in pts if 0 < p < zmax] or None,
                      limit=400, epsabs=1e-11, epsrel=1e-10)
        # tail: u, v vanish beyond the box
        tail, _ = quad(lambda z: (w(x + z) + w(x - z)) * ux * z ** (-1.0 - 2.0 * s),
                       zmax, np.inf, limit=200, epsabs=1e-11, epsrel=1e-10)
        return C * w(x) * (val + tail)

    term_omega, _ = quad(lambda x: strong_op(x) * vfun(x), a, b,
                         limit=200, epsabs=1e-9, epsrel=1e-9)

    def neumann_deriv(x: float) -> float:
        ux = ufun(x)
        val, _ = quad(lambda y: w(y) * (ux - ufun(y)) * abs(x - y) ** (-1.0 - 2.0 * s),
                      a, b, limit=200, epsabs=1e-11, epsrel=1e-10)
        return C * w(x) * val

    term_ext = 0.0
    for lo, hi in ((-L, a), (b, L)):
        val, _ = quad(lambda x: neumann_deriv(x) * vfun(x), lo, hi,
                      limit=200, epsabs=1e-9, epsrel=1e-9)
        term_ext += val

    return float(abs(masked_form - (term_omega + term_ext)))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def dn_to_csv(dn: DNMatrix, path) -> None:
    """Write a DN matrix as CSV with basis labels in the header."""
    rows = dn.meta.get("row_labels", [f"f{i}" for i in range(dn.entries.shape[0])])
    cols = dn.meta.get("col_labels", [f"g{j}" for j in range(dn.entries.shape[1])])
    with open(path, "w") as fh:
        fh.write("kind," + dn.kind + "\n")
        fh.write("label," + ",".join(cols) + "\n")
        for lab, row in zip(rows, dn.entries):
            fh.write(lab + "," + ",".join(f"{x:.17g}" for x in row) + "\n")
