"""Spatial grids on a truncated box, time grids, and sampled space-time fields.

The computational domain is the box [-L, L]^n (n = 1 on the implemented path)
carved into a uniform grid of spacing h.  An interior region Omega and a set of
named exterior measurement regions live strictly inside the box; every region
boundary snaps to grid nodes.  Space-time functions are stored as plain arrays
of nodal samples, optionally together with the callable they were sampled
from (used by quadrature routines that need sub-grid information).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "FracOrder",
    "TimeGrid",
    "DomainSpec",
    "Field",
    "Conductivity",
    "build_domain",
    "sample",
    "zero_field",
    "apply_support",
    "make_conductivity",
    "constant_conductivity",
    "time_reverse",
    "discrete_norms",
]

_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class FracOrder:
    """Order s of the fractional Laplacian in dimension n.

    The constructor accepts any 0 < s < 1.  Operations that rely on the
    subcritical scaling s < n/2 (e.g. concentrating sequences) must check
    the ``subcritical`` property themselves.
    """

    s: float
    n: int = 1

    def __post_init__(self):
        if not (0.0 < self.s < 1.0):
            raise ValueError(f"fractional order s must lie in (0, 1), got {self.s}")
        if self.n not in (1, 2):
            raise ValueError(f"spatial dimension must be 1 or 2, got {self.n}")

    @property
    def subcritical(self) -> bool:
        """True when s < n/2 (needed for L^2-vanishing concentration)."""
        return self.s < 0.5 * self.n


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [0, T] with a theta-scheme parameter."""

    T: float
    n_t: int
    theta: float = 1.0

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("final time T must be positive")
        if self.n_t < 1:
            raise ValueError("need at least one time step")
        if self.theta not in (0.5, 1.0):
            raise ValueError("theta must be 1/2 (Crank-Nicolson) or 1 (implicit Euler)")

    @property
    def tau(self) -> float:
        return self.T / self.n_t

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)


class DomainSpec:
    """Uniform grid on [-L, L] with an interior region and exterior sets.

    Node classification:
      * ``interior``  -- nodes strictly inside Omega,
      * ``exterior``  -- in-box nodes outside the closure of Omega,
      * the two Omega endpoints and the two box endpoints are neither.

    Degrees of freedom (basis hats) live at all nodes strictly inside the
    box; the box-boundary nodes carry no basis function.
    """

    def __init__(
        self,
        L: float,
        h: float,
        omega: tuple[float, float],
        exterior_sets: Mapping[str, tuple[float, float]],
        disjoint_pairs: Sequence[tuple[str, str]] = (),
    ):
        if L <= 0 or h <= 0:
            raise ValueError("box halfwidth and grid spacing must be positive")
        n_cells = _snap_count(2 * L, h)
        self.L = float(L)
        self.h = float(h)
        self.n = 1
        self.nodes = -L + h * np.arange(n_cells + 1)
        # round-off hygiene: force exact symmetric endpoints
        self.nodes[-1] = L
        self.nodes[0] = -L

        a, b = float(omega[0]), float(omega[1])
        _require_snapped(a, L, h, "omega")
        _require_snapped(b, L, h, "omega")
        if not a < b:
            raise ValueError("omega must be a nonempty interval")
        if a - (-L) < 2 * h - _SNAP_TOL or L - b < 2 * h - _SNAP_TOL:
            raise ValueError("insufficient padding: omega must keep distance >= 2h from the box boundary")
        self.omega = (a, b)

        self.exterior_sets: dict[str, tuple[float, float]] = {}
        for name, (w0, w1) in exterior_sets.items():
            w0, w1 = float(w0), float(w1)
            _require_snapped(w0, L, h, name)
            _require_snapped(w1, L, h, name)
            if not w0 < w1:
                raise ValueError(f"exterior set {name!r} must be a nonempty interval")
            if w1 > a + _SNAP_TOL and w0 < b - _SNAP_TOL:
                raise ValueError(f"exterior set {name!r} overlaps omega")
            if w0 < -L - _SNAP_TOL or w1 > L + _SNAP_TOL:
                raise ValueError(f"exterior set {name!r} leaves the computational box")
            self.exterior_sets[name] = (w0, w1)

        for p, q in disjoint_pairs:
            (p0, p1), (q0, q1) = self.exterior_sets[p], self.exterior_sets[q]
            if p1 > q0 + _SNAP_TOL and q1 > p0 + _SNAP_TOL:
                raise ValueError(f"exterior sets {p!r} and {q!r} flagged disjoint-pair but overlap")
        self.disjoint_pairs = tuple((p, q) for p, q in disjoint_pairs)

        x = self.nodes
        self.dof_indices = np.arange(1, len(x) - 1)
        self.interior_mask = (x > a + _SNAP_TOL) & (x < b - _SNAP_TOL)
        on_domain_boundary = (np.abs(x - a) <= _SNAP_TOL) | (np.abs(x - b) <= _SNAP_TOL)
        on_box_boundary = (np.abs(np.abs(x) - L) <= _SNAP_TOL)
        self.exterior_mask = ~self.interior_mask & ~on_domain_boundary & ~on_box_boundary
        # masks restricted to the degree-of-freedom index set
        self.dof_interior = self.interior_mask[self.dof_indices]
        self.dof_exterior = self.exterior_mask[self.dof_indices]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dof(self) -> int:
        return len(self.dof_indices)

    @property
    def interior_indices(self) -> np.ndarray:
        return np.nonzero(self.interior_mask)[0]

    def set_mask(self, name: str, open_interval: bool = True) -> np.ndarray:
        """Boolean node mask of a named exterior set (open by default)."""
        w0, w1 = self.exterior_sets[name]
        x = self.nodes
        if open_interval:
            return (x > w0 + _SNAP_TOL) & (x < w1 - _SNAP_TOL)
        return (x >= w0 - _SNAP_TOL) & (x <= w1 + _SNAP_TOL)

    def restrict(self, values: np.ndarray) -> np.ndarray:
        """Restrict a nodal array (first axis = nodes) to the DOF index set."""
        return values[self.dof_indices]

    def content_key(self) -> bytes:
        """Stable byte string identifying the grid geometry."""
        import struct

        parts = [struct.pack("<dd", self.L, self.h), struct.pack("<dd", *self.omega)]
        for name in sorted(self.exterior_sets):
            parts.append(name.encode())
            parts.append(struct.pack("<dd", *self.exterior_sets[name]))
        return b"".join(parts)


def _snap_count(length: float, h: float) -> int:
    m = length / h
    k = round(m)
    if abs(m - k) > 1e-8 or k < 4:
        raise ValueError("box length must be an integer multiple (>= 4) of the grid spacing")
    return k


def _require_snapped(value: float, L: float, h: float, what: str) -> None:
    m = (value + L) / h
    if abs(m - round(m)) > 1e-8:
        raise ValueError(f"region {what!r} endpoint {value} does not snap to a grid node")


SUPPORT_TAGS = ("interior-only", "exterior-only", "full")


@dataclass
class Field:
    """A space-time function sampled on grid nodes x time steps."""

    values: np.ndarray  # shape (n_nodes, n_t + 1)
    support_tag: str = "full"
    expr: Optional[Callable[[float, float], float]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("field values must be a 2-d array (nodes x times)")
        if self.support_tag not in SUPPORT_TAGS:
            raise ValueError(f"unknown support tag {self.support_tag!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite samples")

    def copy(self) -> "Field":
        return Field(self.values.copy(), self.support_tag, self.expr)

    def slice(self, k: int) -> np.ndarray:
        return self.values[:, k]


def _support_mask(spec: DomainSpec, tag: str) -> np.ndarray:
    if tag == "interior-only":
        return spec.interior_mask
    if tag == "exterior-only":
        return spec.exterior_mask
    mask = np.ones(spec.n_nodes, dtype=bool)
    return mask


def apply_support(values: np.ndarray, spec: DomainSpec, tag: str) -> np.ndarray:
    out = np.array(values, dtype=float)
    mask = _support_mask(spec, tag)
    out[~mask, :] = 0.0
    if tag != "full":
        # nothing lives on the box boundary nodes
        out[0, :] = 0.0
        out[-1, :] = 0.0
    return out


def sample(
    expr: Callable[[float, float], float],
    spec: DomainSpec,
    tg: TimeGrid,
    tag: str = "full",
) -> Field:
    """Sample a pointwise function of (x, t) on the grid, masked by support tag."""
    x = spec.nodes
    t = tg.times
    vals = np.empty((spec.n_nodes, tg.n_t + 1))
    for k, tk in enumerate(t):
        vals[:, k] = np.asarray([expr(xi, tk) for xi in x], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("sampled expression produced non-finite values")
    vals = apply_support(vals, spec, tag)
    return Field(vals, tag, expr=expr)


def zero_field(spec: DomainSpec, tg: TimeGrid, tag: str = "full") -> Field:
    return Field(np.zeros((spec.n_nodes, tg.n_t + 1)), tag)


def time_reverse(u: Field, tg: TimeGrid) -> Field:
    """Reverse the time axis: output(., k) = input(., n_t - k)."""
    if u.values.shape[1] != tg.n_t + 1:
        raise ValueError("field and time grid sizes disagree")
    rev_expr = None
    if u.expr is not None:
        T, inner = tg.T, u.expr
        rev_expr = lambda x, t: inner(x, T - t)  # noqa: E731
    return Field(u.values[:, ::-1].copy(), u.support_tag, expr=rev_expr)


@dataclass
class Conductivity:
    """Conductivity samples together with derived quantities.

    gamma must satisfy gamma0 <= gamma <= 1/gamma0 everywhere; m is the
    background deviation gamma^{1/2} - 1 and dt_gamma holds time-derivative
    samples (analytic when supplied, centered differences otherwise).
    """

    gamma: Field
    gamma0: float
    m: Field
    dt_gamma: Field

    def __post_init__(self):
        g = self.gamma.values
        if not (0 < self.gamma0 <= 1):
            raise ValueError("ellipticity bound gamma0 must lie in (0, 1]")
        if g.min() < self.gamma0 - 1e-12 or g.max() > 1.0 / self.gamma0 + 1e-12:
            raise ValueError("conductivity violates the ellipticity bounds")
        if np.max(np.abs(self.m.values + 1.0 - np.sqrt(g))) > 1e-13:
            raise ValueError("background deviation inconsistent with gamma")

    @property
    def time_independent(self) -> bool:
        g = self.gamma.values
        return bool(np.max(np.abs(g - g[:, :1])) <= 1e-13)

    def sqrt_slice(self, k: int) -> np.ndarray:
        return np.sqrt(self.gamma.values[:, k])


def make_conductivity(
    gamma_fn: Callable[[float, float], float],
    spec: DomainSpec,
    tg: TimeGrid,
    gamma0: Optional[float] = None,
    dt_gamma_fn: Optional[Callable[[float, float], float]] = None,
) -> Conductivity:
    """Build a Conductivity by sampling an analytic gamma(x, t)."""
    gamma = sample(gamma_fn, spec, tg, tag="full")
    g = gamma.values
    if gamma0 is None:
        lo, hi = g.min(), g.max()
        gamma0 = min(lo, 1.0 / hi)
        gamma0 = min(1.0, gamma0)
    m_vals = np.sqrt(g) - 1.0
    m = Field(m_vals, "full", expr=lambda x, t: np.sqrt(gamma_fn(x, t)) - 1.0)
    if dt_gamma_fn is not None:
        dt = sample(dt_gamma_fn, spec, tg, tag="full")
    else:
        dt = Field(_centered_dt(g, tg.tau), "full")
    return Conductivity(gamma=gamma, gamma0=float(gamma0), m=m, dt_gamma=dt)


def constant_conductivity(value: float, spec: DomainSpec, tg: TimeGrid) -> Conductivity:
    return make_conductivity(lambda x, t: value, spec, tg, dt_gamma_fn=lambda x, t: 0.0)


def _centered_dt(g: np.ndarray, tau: float) -> np.ndarray:
    dt = np.empty_like(g)
    if g.shape[1] == 1:
        return np.zeros_like(g)
    dt[:, 1:-1] = (g[:, 2:] - g[:, :-2]) / (2 * tau)
    dt[:, 0] = (-3 * g[:, 0] + 4 * g[:, 1] - g[:, 2]) / (2 * tau) if g.shape[1] > 2 else (g[:, 1] - g[:, 0]) / tau
    dt[:, -1] = (3 * g[:, -1] - 4 * g[:, -2] + g[:, -3]) / (2 * tau) if g.shape[1] > 2 else (g[:, -1] - g[:, -2]) / tau
    return dt


def build_domain(config: Mapping) -> DomainSpec:
    """Build a DomainSpec from a nested key-value description.

    Expected keys: ``L``, ``h``, ``omega`` (pair), ``exterior_sets``
    (name -> pair), optional ``disjoint_pairs`` (list of name pairs).
    """
    try:
        L = float(config["L"])
        h = float(config["h"])
        omega = tuple(config["omega"])
    except KeyError as exc:
        raise ValueError(f"domain config missing key {exc}") from exc
    exterior = {str(k): tuple(v) for k, v in dict(config.get("exterior_sets", {})).items()}
    pairs = [tuple(p) for p in config.get("disjoint_pairs", [])]
    return DomainSpec(L=L, h=h, omega=omega, exterior_sets=exterior, disjoint_pairs=pairs)


def discrete_norms(u: Field, S, tg: TimeGrid) -> dict:
    """Discrete space-time norms of a field.

    ``hs_seminorm_sq`` is tau * sum_k u_k^T A u_k; the L^2 norms use the
    mass matrix.  ``S`` is a StiffnessSet assembled on the same grid.
    """
    vals = u.values[S.spec.dof_indices] if u.values.shape[0] == S.spec.n_nodes else u.values
    if vals.shape[0] != S.A.shape[0]:
        raise ValueError("field and stiffness dimensions disagree")
    tau = tg.tau
    hs = float(tau * np.einsum("ik,ij,jk->", vals, S.A, vals))
    l2_slices = np.einsum("ik,ij,jk->k", vals, S.M, vals)
    l2_slices = np.maximum(l2_slices, 0.0)
    return {
        "l2_space_time": float(np.sqrt(tau * l2_slices.sum())),
        "hs_seminorm_sq": hs,
        "linf_l2": float(np.sqrt(l2_slices.max())),
    }
