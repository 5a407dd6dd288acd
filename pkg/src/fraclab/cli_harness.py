"""Batch experiment runner: config parsing, scenario orchestration, the
matrix cache, and all file outputs.

Configs are YAML with a fixed schema (see docs/config_schema.yaml); unknown
keys are errors.  Every scenario writes its CSV artifacts plus a JSON run
manifest with per-assertion verdicts; the process exit code reflects the
verdicts (0 all pass, 1 assertion failure, 2 config error, 3 internal error).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import shutil
import struct
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from .domain_time import (
    DomainSpec,
    Field,
    FracOrder,
    TimeGrid,
    make_conductivity,
    sample,
)
from .kernel_assembly import (
    StiffnessSet,
    assemble_mass,
    assemble_frac_stiffness,
    assemble_potentials,
    kernel_constant,
    read_matrix_cache,
    tail_values,
    write_matrix_cache,
)
from .solvers import solve_forward_diffusion, verify_liouville
from .dn_maps import (
    ExteriorBasis,
    check_old_new_equivalence,
    check_selfadjoint,
    dn_N_Q,
    dn_lambda,
    dn_to_csv,
    exterior_exterior_term,
    make_exterior_basis,
    neumann_N_gamma,
)
from .inversion import (
    DNMisfit,
    build_concentration_family,
    choose_lambda_discrepancy,
    exterior_reconstruct,
    integral_identity_eval,
    interior_gauss_newton,
    make_parameterization,
    runge_control,
)

__all__ = [
    "ExperimentConfig",
    "RunManifest",
    "ConfigError",
    "run_scenario",
    "cache_get_or_assemble",
    "cache_root",
    "main",
]

SCENARIOS = (
    "forward-demo",
    "liouville-check",
    "dn-consistency",
    "exterior-recon",
    "integral-identity",
    "runge",
    "interior-recovery",
    "full-suite",
)

CACHE_ENV = "FRACLAB_CACHE_DIR"


class ConfigError(ValueError):
    """Raised for malformed or contradictory experiment configs."""


def _fmt(x) -> str:
    return "%.17g" % float(x)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_BASE_CONFIG = {
    "scenario": "forward-demo",
    "seed": 0,
    "output_dir": "fraclab-out",
    "jobs": 1,
    "domain": {
        "L": 2.0,
        "h": 0.04,
        "omega": [-1.0, 1.0],
        "exterior_sets": {"W1": [-1.8, -1.2], "W2": [1.2, 1.8]},
    },
    "frac": {"s": 0.5, "n": 1},
    "time": {"T": 1.0, "n_t": 16, "theta": 1.0},
    "phantom": {"name": "constant", "value": 1.0, "amplitude": 0.2, "radius": 0.5},
    "phantom2": {"name": "bump", "value": 1.0, "amplitude": 0.4, "radius": 0.5},
    "basis": {"f_set": "W1", "g_set": "W2", "n_space": 6, "n_time": 5, "normalize": False},
    "recon": {"set": "W2", "x0": 1.5, "r0": 0.4, "n_max": 5, "temporal_weight": "eta"},
    "runge": {"set": "W2", "sizes": [10, 20, 40], "eps": 1.0e-10},
    "inversion": {
        "n_params": 8,
        "lam": 1.0e-6,
        "max_iter": 25,
        "tier": "inverse-crime",
        "noise_level": 0.01,
    },
    "tolerances": {
        "solver_residual": 1.0e-10,
        "steady_drift": 1.0e-4,
        "liouville_const1": 1.0e-10,
        "liouville_const": 1.0e-8,
        "liouville_smooth": 1.0e-2,
        "partition": 1.0e-12,
        "selfadjoint": 1.0e-8,
        "equivalence": 1.0e-9,
        "nq_representation": 1.0e-12,
        "recon_gap": 0.05,
        "identity_equal": 1.0e-12,
        "identity_bump": 1.0e-6,
        "runge_inrange": 1.0e-8,
        "recovery": 0.05,
    },
}

_SCENARIO_OVERRIDES = {
    "forward-demo": {"time": {"T": 8.0, "n_t": 160}},
    "liouville-check": {"domain": {"h": 0.05}, "time": {"n_t": 8}},
    "dn-consistency": {"phantom": {"name": "bump"}},
    "exterior-recon": {
        "domain": {"h": 0.005, "exterior_sets": {"W1": [-1.8, -1.2], "W2": [1.1, 1.9]}},
        "frac": {"s": 0.45},
    },
    "integral-identity": {"domain": {"h": 0.05}, "time": {"n_t": 16}},
    "runge": {"domain": {"h": 0.04}, "time": {"n_t": 24}},
    "interior-recovery": {
        "domain": {"h": 0.02},
        "time": {"n_t": 32},
        "phantom": {"name": "bump"},
        "basis": {"normalize": True},
    },
    "full-suite": {},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key != "exterior_sets":
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration (defaults merged with user input)."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        scenario = raw.get("scenario", _BASE_CONFIG["scenario"])
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
        base = _merge(_BASE_CONFIG, _SCENARIO_OVERRIDES[scenario])
        cfg = cls(_merge(base, raw))
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"config parse error: {exc}")
        return cls.from_dict(raw if raw is not None else {})

    def validate(self) -> None:
        d = self.data
        if d["scenario"] not in SCENARIOS:
            raise ConfigError(f"unknown scenario {d['scenario']!r}")
        for name, tol in d["tolerances"].items():
            if not (float(tol) > 0):
                raise ConfigError(f"tolerance {name} must be positive")
        sets = d["domain"]["exterior_sets"]
        for key in ("f_set", "g_set"):
            if d["basis"][key] not in sets:
                raise ConfigError(f"basis {key}={d['basis'][key]!r} is not a declared exterior set")
        if d["recon"]["set"] not in sets:
            raise ConfigError(f"recon set {d['recon']['set']!r} is not a declared exterior set")
        if d["runge"]["set"] not in sets:
            raise ConfigError(f"runge set {d['runge']['set']!r} is not a declared exterior set")
        if d["recon"]["temporal_weight"] not in ("eta", "t-eta"):
            raise ConfigError("recon.temporal_weight must be 'eta' or 't-eta'")
        if d["inversion"]["tier"] not in ("inverse-crime", "honest", "noise"):
            raise ConfigError("inversion.tier must be inverse-crime, honest, or noise")
        if int(d["seed"]) < 0:
            raise ConfigError("seed must be non-negative")

    def domain_spec(self, h: float = None) -> DomainSpec:
        d = self.data["domain"]
        sets = {k: tuple(v) for k, v in d["exterior_sets"].items()}
        return DomainSpec(L=float(d["L"]), h=float(h if h is not None else d["h"]),
                          omega=tuple(d["omega"]), exterior_sets=sets)

    def frac_order(self) -> FracOrder:
        f = self.data["frac"]
        return FracOrder(float(f["s"]), int(f["n"]))

    def time_grid(self, n_t: int = None) -> TimeGrid:
        t = self.data["time"]
        return TimeGrid(T=float(t["T"]), n_t=int(n_t if n_t is not None else t["n_t"]),
                        theta=float(t["theta"]))

    def tol(self, name: str) -> float:
        return float(self.data["tolerances"][name])


# ---------------------------------------------------------------------------
# Phantom families
# ---------------------------------------------------------------------------


def _bump(y: float) -> float:
    if abs(y) >= 1.0:
        return 0.0
    return math.exp(-1.0 / (1.0 - y * y))


def phantom_conductivity(block: dict, spec: DomainSpec, tg: TimeGrid):
    """Named analytic conductivity families used by the scenarios."""
    name = block["name"]
    a = float(block.get("amplitude", 0.2))
    r = float(block.get("radius", 0.5))
    T = tg.T
    if name == "constant":
        v = float(block.get("value", 1.0))
        return make_conductivity(lambda x, t: v, spec, tg, dt_gamma_fn=lambda x, t: 0.0)
    if name == "bump":
        return make_conductivity(lambda x, t: 1.0 + a * _bump(x / r), spec, tg,
                                 dt_gamma_fn=lambda x, t: 0.0)
    if name == "time-sine":
        return make_conductivity(
            lambda x, t: 1.0 + a * math.sin(math.pi * t / T), spec, tg,
            dt_gamma_fn=lambda x, t: a * math.pi / T * math.cos(math.pi * t / T))
    if name == "space-time":
        return make_conductivity(
            lambda x, t: 1.0 + a * _bump(x / r) * (1.0 + t / T), spec, tg,
            dt_gamma_fn=lambda x, t: a * _bump(x / r) / T)
    raise ConfigError(f"unknown phantom family {name!r}")


# ---------------------------------------------------------------------------
# Matrix cache
# ---------------------------------------------------------------------------


def cache_root() -> str:
    env = os.environ.get(CACHE_ENV)
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "fraclab")


def cache_get_or_assemble(spec: DomainSpec, fo: FracOrder, cache_dir: str = None):
    """Stiffness set with the (expensive) fractional stiffness served from the
    on-disk cache when a bit-identical match exists.

    Returns (stiffness_set, info) where info records the content key, the
    file hash, and whether the call was a hit.
    """
    cache_dir = cache_dir or cache_root()
    os.makedirs(cache_dir, exist_ok=True)
    key_bytes = spec.content_key() + struct.pack("<dq", fo.s, fo.n)
    key = hashlib.sha256(key_bytes).hexdigest()[:24]
    path = os.path.join(cache_dir, f"A-{key}.fdck")
    A = read_matrix_cache(path, fo, spec)
    hit = A is not None
    if A is None:
        A = assemble_frac_stiffness(spec, fo)
        write_matrix_cache(path, A, fo, spec)
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    S = StiffnessSet(spec=spec, fo=fo, A=A, M=assemble_mass(spec),
                     zeta=tail_values(spec, fo), C=kernel_constant(fo))
    return S, {"key": key, "file": path, "sha256": digest, "hit": hit}


# ---------------------------------------------------------------------------
# Manifest and output helpers
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Everything needed to audit a run: config, cache identity, timings,
    and one verdict per scenario assertion."""

    config: dict
    version: str = __version__
    cache: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def check(self, name: str, value: float, tol: float, passed=None) -> bool:
        ok = bool(value <= tol) if passed is None else bool(passed)
        self.verdicts.append(
            {"name": name, "value": _fmt(value), "tolerance": _fmt(tol), "passed": ok}
        )
        return ok

    @property
    def all_passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts)

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(
                {
                    "version": self.version,
                    "config": self.config,
                    "cache": self.cache,
                    "timings": {k: _fmt(v) for k, v in self.timings.items()},
                    "verdicts": self.verdicts,
                    "outputs": self.outputs,
                    "extra": self.extra,
                    "all_passed": self.all_passed,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
        return path


def _write_csv(out_dir: str, name: str, header: list, rows) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, (int, float, np.floating)) else str(v)
                             for v in row) + "\n")
    return path


def _pmap(fn, items, jobs: int):
    """Order-preserving map, threaded when jobs > 1 (results are assigned by
    index, so the output is independent of scheduling)."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def _context(cfg: ExperimentConfig, man: RunManifest):
    t0 = time.perf_counter()
    spec = cfg.domain_spec()
    fo = cfg.frac_order()
    tg = cfg.time_grid()
    S, info = cache_get_or_assemble(spec, fo)
    man.cache.append(info)
    man.timings["assemble"] = man.timings.get("assemble", 0.0) + time.perf_counter() - t0
    return spec, fo, tg, S


def _scenario_forward_demo(cfg, man, out_dir, prefix=""):
    spec, fo, tg, S = _context(cfg, man)
    c = phantom_conductivity(cfg.data["phantom"], spec, tg)
    f_set = cfg.data["basis"]["f_set"]
    w0, w1 = spec.exterior_sets[f_set]
    cx, rx = 0.5 * (w0 + w1), 0.5 * (w1 - w0)
    f = sample(lambda x, t: _bump((x - cx) / rx), spec, tg, tag="exterior-only")
    t0 = time.perf_counter()
    rep = solve_forward_diffusion(c, f, None, None, spec, fo, tg, S)
    man.timings[prefix + "forward-demo"] = time.perf_counter() - t0
    u = rep.solution.values[spec.dof_indices]
    Md = S.M
    diff = u[:, -1] - u[:, -2]
    drift = math.sqrt(max(diff @ (Md @ diff), 0.0))
    scale = math.sqrt(max(u[:, -1] @ (Md @ u[:, -1]), 1e-300))
    man.check(prefix + "solver_residual", rep.residual_max, cfg.tol("solver_residual"))
    man.check(prefix + "steady_drift", drift / scale, cfg.tol("steady_drift"))
    rows = [(x, u_last) for x, u_last in zip(spec.nodes[spec.dof_indices], u[:, -1])]
    man.outputs.append(_write_csv(out_dir, prefix + "steady_state.csv", ["x", "u_final"], rows))


def _scenario_liouville(cfg, man, out_dir, prefix=""):
    spec, fo, tg, S = _context(cfg, man)
    f_set = cfg.data["basis"]["f_set"]
    w0, w1 = spec.exterior_sets[f_set]
    cx, rx = 0.5 * (w0 + w1), 0.5 * (w1 - w0)
    f = sample(lambda x, t: _bump((x - cx) / rx) * min(t / max(tg.tau, 1e-12), 1.0),
               spec, tg, tag="exterior-only")
    cases = [
        ("const1", {"name": "constant", "value": 1.0}, cfg.tol("liouville_const1")),
        ("const4", {"name": "constant", "value": 4.0}, cfg.tol("liouville_const")),
        ("smooth", {"name": "space-time", "amplitude": 0.5, "radius": 0.6},
         cfg.tol("liouville_smooth")),
    ]
    rows = []
    t0 = time.perf_counter()
    for label, block, tol in cases:
        c = phantom_conductivity(block, spec, tg)
        rec = verify_liouville(c, f, spec, fo, tg, S, assemble_potentials(c, spec, fo, tg))
        man.check(prefix + f"liouville_{label}", rec["discrepancy"], tol)
        rows.append((label, rec["discrepancy"]))
    man.timings[prefix + "liouville-check"] = time.perf_counter() - t0
    man.outputs.append(_write_csv(out_dir, prefix + "liouville.csv",
                                  ["case", "discrepancy"], rows))


def _scenario_dn_consistency(cfg, man, out_dir, prefix=""):
    spec, fo, tg, S = _context(cfg, man)
    jobs = int(cfg.data["jobs"])
    c = phantom_conductivity(cfg.data["phantom"], spec, tg)
    b = cfg.data["basis"]
    fb = make_exterior_basis(spec, tg, b["f_set"], b["n_space"], b["n_time"],
                             normalize=b["normalize"], S=S)
    gb = make_exterior_basis(spec, tg, b["g_set"], b["n_space"], b["n_time"],
                             normalize=b["normalize"], S=S)
    t0 = time.perf_counter()
    sols = _pmap(
        lambda f: solve_forward_diffusion(c, f, None, None, spec, fo, tg, S)
        .solution.values[spec.dof_indices],
        fb.fields, jobs)
    lam = dn_lambda(c, fb, gb, spec, fo, tg, S, solutions=sols)
    ngm = neumann_N_gamma(c, fb, gb, spec, fo, tg, S, solutions=sols)
    ee = exterior_exterior_term(c, fb, gb, spec, fo, tg, S)
    partition = float(np.max(np.abs(lam.entries - ngm.entries - ee)))
    man.check(prefix + "dn_partition", partition, cfg.tol("partition"))

    P = assemble_potentials(c, spec, fo, tg)
    sa = check_selfadjoint(c, P, fb, gb, spec, fo, tg, S)
    man.check(prefix + "dn_selfadjoint", sa, cfg.tol("selfadjoint"))

    nq_direct = dn_N_Q(c, P, fb, gb, spec, fo, tg, S, method="direct")
    nq_rep = dn_N_Q(c, P, fb, gb, spec, fo, tg, S, method="representation")
    rep_gap = float(np.max(np.abs(nq_direct.entries - nq_rep.entries)))
    man.check(prefix + "dn_representation", rep_gap, cfg.tol("nq_representation"))

    c1 = phantom_conductivity({"name": "constant", "value": 1.0}, spec, tg)
    out = check_old_new_equivalence(c1, c, fb, gb, spec, fo, tg, S,
                                    tol=cfg.tol("equivalence"))
    man.check(prefix + "dn_equivalence",
              abs(out["lambda_gap"] - out["N_gap"]) - out["correction"],
              cfg.tol("equivalence"),
              passed=abs(out["lambda_gap"] - out["N_gap"])
              <= out["correction"] + cfg.tol("equivalence"))
    man.timings[prefix + "dn-consistency"] = time.perf_counter() - t0
    for name, dn in (("lambda", lam), ("n_gamma", ngm), ("n_q", nq_direct)):
        path = os.path.join(out_dir, prefix + f"dn_{name}.csv")
        dn_to_csv(dn, path)
        man.outputs.append(path)


def _scenario_exterior_recon(cfg, man, out_dir, prefix=""):
    spec, fo, tg, S = _context(cfg, man)
    r = cfg.data["recon"]
    fam = build_concentration_family(spec, fo, S, tg, r["set"], float(r["x0"]),
                                     int(r["n_max"]), r0=float(r["r0"]))
    if r["temporal_weight"] == "t-eta":
        base_eta, T = fam.eta, tg.T
        fam.eta = lambda t: (t / T) * base_eta(t)
    c = phantom_conductivity(cfg.data["phantom"], spec, tg)
    t0 = time.perf_counter()
    rec = exterior_reconstruct(c, fam, spec, fo, tg, S)
    man.timings[prefix + "exterior-recon"] = time.perf_counter() - t0
    rel = [g / abs(rec["target"]) for g in rec["gaps"]]
    man.check(prefix + "recon_gap", rel[-1], cfg.tol("recon_gap"))
    man.check(prefix + "recon_monotone", 0.0, 1.0,
              passed=all(rel[i] > rel[i + 1] for i in range(len(rel) - 3, len(rel) - 1)))
    rows = [(N + 1, est, rec["target"], gap, remc)
            for N, (est, gap, remc) in enumerate(
                zip(rec["estimates"], rec["gaps"], rec["remainder_constants"]))]
    man.outputs.append(_write_csv(out_dir, prefix + "exterior_recon.csv",
                                  ["N", "estimate", "target", "gap", "remainder_constant"],
                                  rows))


def _scenario_integral_identity(cfg, man, out_dir, prefix=""):
    spec, fo, tg, S = _context(cfg, man)
    b = cfg.data["basis"]
    fb = make_exterior_basis(spec, tg, b["f_set"], 1, 1)
    gb = make_exterior_basis(spec, tg, b["g_set"], 1, 1)
    f, g = fb.fields[0], gb.fields[0]
    c1 = phantom_conductivity(cfg.data["phantom"], spec, tg)
    c1b = phantom_conductivity(cfg.data["phantom"], spec, tg)
    c2 = phantom_conductivity(cfg.data["phantom2"], spec, tg)
    t0 = time.perf_counter()
    same = integral_identity_eval(c1, c1b, f, g, spec, fo, tg, S)
    diff = integral_identity_eval(c1, c2, f, g, spec, fo, tg, S)
    man.timings[prefix + "integral-identity"] = time.perf_counter() - t0
    man.check(prefix + "identity_equal", same["residual"], cfg.tol("identity_equal"))
    man.check(prefix + "identity_bump", diff["residual"], cfg.tol("identity_bump"))
    rows = [("equal", same["lhs"], same["rhs"], same["residual"]),
            ("bump", diff["lhs"], diff["rhs"], diff["residual"])]
    man.outputs.append(_write_csv(out_dir, prefix + "integral_identity.csv",
                                  ["case", "lhs", "rhs", "residual"], rows))


def _scenario_runge(cfg, man, out_dir, prefix=""):
    spec, fo, tg, S = _context(cfg, man)
    r = cfg.data["runge"]
    sizes = [int(k) for k in r["sizes"]]
    eps = float(r["eps"])
    c = phantom_conductivity(cfg.data["phantom"], spec, tg)
    P = assemble_potentials(c, spec, fo, tg)
    big = make_exterior_basis(spec, tg, r["set"], n_space=(max(sizes) + 4) // 5, n_time=5)

    def prefix_basis(k):
        return ExteriorBasis(fields=big.fields[:k], labels=big.labels[:k],
                             set_name=big.set_name, meta=dict(big.meta))

    rng = np.random.default_rng(int(cfg.data["seed"]))
    co = rng.standard_normal(sizes[0])
    from .solvers import solve_reduced_schrodinger
    f0_vals = sum(cc * e.values for cc, e in zip(co, big.fields[: sizes[0]]))
    f0 = Field(np.asarray(f0_vals), "exterior-only")
    rep = solve_reduced_schrodinger(c, f0, None, None, spec, fo, tg, S, P)
    phi_vals = rep.solution.values.copy()
    phi_vals[~spec.interior_mask, :] = 0.0
    phi_in = Field(phi_vals, "interior-only")
    t0 = time.perf_counter()
    out0 = runge_control(phi_in, prefix_basis(sizes[0]), c, P, spec, fo, tg, S, eps=1e-14)
    man.check(prefix + "runge_inrange", out0["residual"], cfg.tol("runge_inrange"))

    tgt = sample(
        lambda x, t: math.sin(math.pi * x) * math.sin(math.pi * t / tg.T) * _bump(x),
        spec, tg, "interior-only")
    res = []
    rows = []
    for k in sizes:
        out = runge_control(tgt, prefix_basis(k), c, P, spec, fo, tg, S, eps=eps)
        res.append(out["residual"])
        rows.append((k, out["residual"], out["condition"], int(out["flagged"])))
    man.timings[prefix + "runge"] = time.perf_counter() - t0
    man.check(prefix + "runge_monotone", 0.0, 1.0,
              passed=all(res[i] > res[i + 1] for i in range(len(res) - 1)))
    man.outputs.append(_write_csv(out_dir, prefix + "runge.csv",
                                  ["basis_size", "residual", "condition", "flagged"], rows))


def _scenario_interior_recovery(cfg, man, out_dir, prefix=""):
    spec, fo, tg, S = _context(cfg, man)
    inv = cfg.data["inversion"]
    b = cfg.data["basis"]
    tier = inv["tier"]
    fb = make_exterior_basis(spec, tg, b["f_set"], b["n_space"], b["n_time"],
                             normalize=b["normalize"], S=S)
    gb = make_exterior_basis(spec, tg, b["g_set"], b["n_space"], b["n_time"],
                             normalize=b["normalize"], S=S)
    param = make_parameterization(spec, int(inv["n_params"]))
    phantom = cfg.data["phantom"]
    c_true = phantom_conductivity(phantom, spec, tg)
    gamma_expr = c_true.gamma.expr

    t0 = time.perf_counter()
    if tier == "honest":
        spec_f = cfg.domain_spec(h=float(cfg.data["domain"]["h"]) / 2.0)
        S_f, info = cache_get_or_assemble(spec_f, fo)
        man.cache.append(info)
        fb_f = make_exterior_basis(spec_f, tg, b["f_set"], b["n_space"], b["n_time"],
                                   normalize=b["normalize"], S=S_f)
        gb_f = make_exterior_basis(spec_f, tg, b["g_set"], b["n_space"], b["n_time"],
                                   normalize=b["normalize"], S=S_f)
        c_f = phantom_conductivity(phantom, spec_f, tg)
        obs = dn_lambda(c_f, fb_f, gb_f, spec_f, fo, tg, S_f).entries
    else:
        obs = dn_lambda(c_true, fb, gb, spec, fo, tg, S).entries
    man.timings[prefix + "recovery-data"] = time.perf_counter() - t0

    lam = float(inv["lam"])
    p0 = np.ones(int(inv["n_params"]))
    t0 = time.perf_counter()
    if tier == "noise":
        rng = np.random.default_rng(int(cfg.data["seed"]))
        sigma = float(inv["noise_level"]) * float(np.linalg.norm(obs)) / math.sqrt(obs.size)
        noise = sigma * rng.standard_normal(obs.shape)
        misfit = DNMisfit(fb, gb, spec, fo, tg, S, observed=obs + noise)
        lam, res = choose_lambda_discrepancy(param, misfit, p0,
                                             noise_norm=float(np.linalg.norm(noise)),
                                             max_iter=int(inv["max_iter"]))
    else:
        misfit = DNMisfit(fb, gb, spec, fo, tg, S, observed=obs)
        res = interior_gauss_newton(param, misfit, p0, lam=lam,
                                    max_iter=int(inv["max_iter"]))
    man.timings[prefix + "recovery-solve"] = time.perf_counter() - t0

    xs = spec.nodes
    gamma_true = np.array([gamma_expr(x, 0.0) for x in xs])
    inside = np.abs(xs) < abs(spec.omega[1])
    err = float(np.sqrt(np.sum((res.gamma_nodes[inside] - gamma_true[inside]) ** 2)
                        / np.sum(gamma_true[inside] ** 2)))
    man.check(prefix + "recovery_error", err, cfg.tol("recovery"))
    man.extra[prefix + "recovery"] = {
        "tier": tier,
        "lambda": _fmt(lam),
        "misfit_history": [_fmt(v) for v in res.misfit_history],
        "converged": res.converged,
        "message": res.message,
    }
    rows = [(x, gamma_expr(x, 0.0), g) for x, g in
            zip(param.coarse_x, [param.gamma_callable(res.p)(x, 0.0) for x in param.coarse_x])]
    man.outputs.append(_write_csv(out_dir, prefix + "recovery.csv",
                                  ["x", "gamma_true", "gamma_recovered"], rows))


_SCENARIO_FNS = {
    "forward-demo": _scenario_forward_demo,
    "liouville-check": _scenario_liouville,
    "dn-consistency": _scenario_dn_consistency,
    "exterior-recon": _scenario_exterior_recon,
    "integral-identity": _scenario_integral_identity,
    "runge": _scenario_runge,
    "interior-recovery": _scenario_interior_recovery,
}


def run_scenario(cfg: ExperimentConfig) -> RunManifest:
    """Execute the configured scenario, writing artifacts and the manifest."""
    out_dir = cfg.data["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    man = RunManifest(config=copy.deepcopy(cfg.data))
    scenario = cfg.data["scenario"]
    t0 = time.perf_counter()
    if scenario == "full-suite":
        for name in SCENARIOS[:-1]:
            # re-resolve so each stage gets its scenario defaults
            sub = ExperimentConfig.from_dict(
                {"seed": cfg.data["seed"], "output_dir": out_dir,
                 "jobs": cfg.data["jobs"], "scenario": name})
            _SCENARIO_FNS[name](sub, man, out_dir, prefix=name + ".")
    else:
        _SCENARIO_FNS[scenario](cfg, man, out_dir, prefix="")
    man.timings["total"] = time.perf_counter() - t0
    man.write(out_dir)
    return man


# ---------------------------------------------------------------------------
# Command-line interface
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fraclab",
                                 description="nonlocal-diffusion Calderon laboratory")
    ap.add_argument("--output-dir", help="override the config's output directory")
    ap.add_argument("--seed", type=int, help="override the config's RNG seed")
    ap.add_argument("--jobs", type=int, default=None,
                    help="worker threads for independent measurement-column solves")
    sub = ap.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run a scenario from a config file")
    run_p.add_argument("config", help="path to YAML config")
    val_p = sub.add_parser("validate", help="parse and validate a config file")
    val_p.add_argument("config", help="path to YAML config")
    cache_p = sub.add_parser("cache", help="matrix cache maintenance")
    cache_p.add_argument("action", choices=["clean"])
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "cache":
            root = cache_root()
            if os.path.isdir(root):
                shutil.rmtree(root)
            print(f"cache cleaned: {root}")
            return 0
        cfg = ExperimentConfig.from_yaml(args.config)
        if args.output_dir is not None:
            cfg.data["output_dir"] = args.output_dir
        if args.seed is not None:
            cfg.data["seed"] = args.seed
        if args.jobs is not None:
            cfg.data["jobs"] = args.jobs
        cfg.validate()
        if args.command == "validate":
            print(f"config ok: scenario={cfg.data['scenario']}")
            return 0
        man = run_scenario(cfg)
        for v in man.verdicts:
            status = "PASS" if v["passed"] else "FAIL"
            print(f"{status} {v['name']}: {v['value']} (tol {v['tolerance']})")
        return 0 if man.all_passed else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        import traceback

        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
