"""Assumption checks, a-priori bound certificates, MFG residuals and self-convergence.

Everything in this module is reporting: solution fields are read, never modified.
Suprema and infima over x and p are taken on samples (a periodic x grid and a
radial |p| grid with 64 log-spaced radii up to 1e3, plus p = 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import qmc

from .discretization import SpaceTimeGrid
from .errors import BoundRangeError
from .models import MIN_DENSITY, Model, eval_stack, initial_mass, torus_nodes
from .reformulation import INVERSION_RTOL, boundary_values, ellipticity_gap, invert_H
from .solver import ContinuationConfig, continuation_solve, recover_m

MATRIX_TOL = -1e-10
M_LO, M_HI = 1e-12, 1e12
DEFAULT_BOX = {"p_max": 10.0, "m_min": 0.05, "m_max": 20.0}


# --- assumption checker ------------------------------------------------------------

@dataclass
class InequalityRecord:
    samples: int = 0
    violations: int = 0
    worst_margin: float = math.inf
    worst_point: dict | None = None

    @property
    def passed(self) -> bool:
        return self.violations == 0


@dataclass
class AssumptionReport:
    records: dict = field(default_factory=dict)
    box: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records.values())

    def failed(self) -> list:
        return [k for k, r in self.records.items() if not r.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "box": self.box, "notes": self.notes,
                "records": {k: asdict(r) for k, r in self.records.items()}}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _lam_min(M):
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))[..., 0]


def _norm(a, n):
    # Frobenius norm of each sample's block
    return np.sqrt(np.sum(np.asarray(a).reshape(n, -1) ** 2, axis=1))


def _record(report, name, margin, points, tol=0.0):
    """Fold a margin array (>= tol means satisfied) into the named record."""
    margin = np.asarray(margin, dtype=float)
    margin = np.where(np.isnan(margin), -np.inf, margin)
    rec = report.records.setdefault(name, InequalityRecord())
    rec.samples += margin.size
    bad = margin < tol
    rec.violations += int(bad.sum())
    i = int(np.argmin(margin))
    if margin[i] < rec.worst_margin:
        rec.worst_margin = float(margin[i])
        if bad.any():
            j = int(np.argmax(np.where(bad, -margin, -np.inf)))
            rec.worst_point = {k: np.atleast_1d(v[j]).tolist() for k, v in points.items()}
    if bad.any() and rec.worst_point is None:
        j = int(np.argmin(margin))
        rec.worst_point = {k: np.atleast_1d(v[j]).tolist() for k, v in points.items()}


def check_assumptions(model: Model, box: dict | None = None, n: int = 512) -> AssumptionReport:
    """Evaluate every structural inequality at ``n`` quasi-random points of the box.

    ``box`` has keys ``p_max`` (|p_i| <= p_max) and ``m_min``/``m_max``; x ranges
    over the whole torus.  Matrix inequalities use the smallest eigenvalue of the
    symmetric part of the difference with slack -1e-10.
    """
    box = {**DEFAULT_BOX, **(box or {})}
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    if not 0 < box["m_min"] < box["m_max"]:
        raise ValueError(f"need 0 < m_min < m_max, got {box['m_min']}, {box['m_max']}")
    c = model.constants
    C0, g, g1, g2 = c.C0, c.gamma, c.gamma1, c.gamma2
    d = model.d
    u = qmc.Halton(d=2 * d + 1, scramble=False).random(n + 1)[1:]
    x = u[:, :d]
    p = box["p_max"] * (2 * u[:, d:2 * d] - 1)
    lm0, lm1 = np.log(box["m_min"]), np.log(box["m_max"])
    m = np.exp(lm0 + (lm1 - lm0) * u[:, -1])
    pts = {"x": x, "p": p, "m": m}
    st = eval_stack(model, x, p, m)
    psi = np.asarray(c.psi(m), dtype=float)
    Cb = np.asarray(c.Cbar(m), dtype=float)
    P = np.linalg.norm(p, axis=1)
    I = np.eye(d)
    rep = AssumptionReport(box=dict(box))

    # (M1)
    xq = torus_nodes(d, 256 if d == 1 else 64)
    m0, mass = initial_mass(model, 256 if d == 1 else 64)
    _record(rep, "M1", m0, {"x": xq})
    _record(rep, "M1", [1e-10 - abs(mass - 1.0)], {"mass": np.array([mass])})

    # (H1)
    w = (psi * (1 + P) ** (g - 2))[:, None, None]
    _record(rep, "H1", _lam_min(st.H_pp - w * I / C0), pts, MATRIX_TOL)
    _record(rep, "H1", _lam_min(C0 * w * I - st.H_pp), pts, MATRIX_TOL)
    # (H2)
    _record(rep, "H2", C0 * psi * (1 + P) ** (g - 1) - np.linalg.norm(st.H_p, axis=1), pts)
    _record(rep, "H2", np.sum(st.H_p * p, axis=1) - (1 + 1 / C0) * st.H + Cb, pts)
    # (HM1)
    Pg1 = P**g1
    _record(rep, "HM1", -m * st.H_m - psi * Pg1 / C0, pts)
    _record(rep, "HM1", C0 * psi * Pg1 + Cb + m * st.H_m, pts)
    # (HM2)
    _record(rep, "HM2", -C0 * st.H_m - np.abs(m * st.H_mm), pts)
    _record(rep, "HM2", -C0 * st.H_m - P * np.linalg.norm(st.H_pm, axis=1), pts)
    # (HX1)-(HX3)
    e2 = psi * (1 + P) ** g2
    _record(rep, "HX1", C0 * e2 - np.linalg.norm(st.H_x, axis=1), pts)
    _record(rep, "HX1", C0 * e2 - _norm(st.H_xx, n), pts)
    _record(rep, "HX1", C0 * psi * (1 + P) ** (g2 - 1) - _norm(st.H_xp, n), pts)
    _record(rep, "HX2", C0 * e2 - m * np.linalg.norm(st.H_xm, axis=1), pts)
    st0 = eval_stack(model, x, np.zeros_like(p), m)
    _record(rep, "HX3", C0 - np.linalg.norm(st0.H_x, axis=1), pts)

    # B(., ., 0) = 0, required by the flux assumptions
    with np.errstate(all="ignore"):
        b_zero = np.asarray(model.flux(x, p, np.zeros(n)), dtype=float)
    _record(rep, "B0", -_norm(b_zero, n), pts, -1e-14)
    # (B1)
    wl = (m * psi * P ** (g - 2))[:, None, None]
    wu = (m * psi * (1 + P) ** (g - 2))[:, None, None]
    _record(rep, "B1", _lam_min(st.B_p - wl * I / C0), pts, MATRIX_TOL)
    _record(rep, "B1", _lam_min(C0 * wu * I - st.B_p), pts, MATRIX_TOL)
    # (B2)
    _record(rep, "B2", C0 * psi * (1 + P) ** (g - 1) - np.linalg.norm(st.B_m, axis=1), pts)
    _record(rep, "B2", C0 * psi * (1 + P) ** (g - 2) - _norm(st.B_pm, n), pts)
    _record(rep, "B2", C0 * m * psi * (1 + P) ** (g - 3) - _norm(st.B_pp, n), pts)
    # (BM)
    _record(rep, "BM", -C0 * (1 + P) * st.H_m - np.linalg.norm(st.B_mm, axis=1), pts)
    # (BX1)-(BX3)
    e21 = psi * (1 + P) ** (g2 - 1)
    _record(rep, "BX1", m * C0 * e21 - _norm(st.B_x, n), pts)
    _record(rep, "BX1", m * C0 * e21 - _norm(st.B_xx, n), pts)
    _record(rep, "BX1", C0 * e21 - _norm(st.B_xm, n), pts)
    _record(rep, "BX2", C0 * m * psi * (1 + P) ** (g2 - 2) - _norm(st.B_xp, n), pts)
    _record(rep, "BX3", C0 * m - _norm(st0.B_x, n), pts)

    # (GX): the range of g(x, .) must not depend on x; compared at extreme densities
    xs = torus_nodes(d, 64 if d == 1 else 16)
    for mm in (1e-8, 1e8):
        gv = model.terminal(xs, np.full(xs.shape[0], mm))[0]
        spread = float(np.max(gv) - np.min(gv))
        _record(rep, "GX", [1e-8 * (1 + abs(float(np.mean(gv)))) - spread], {"m": np.array([mm])})
    rep.notes["GX"] = "range of g(x, .) compared across x at m = 1e-8 and m = 1e8"
    # (GX) also needs g_m > 0
    gm = model.terminal(x, m)[1]
    _record(rep, "GX", gm, pts)

    # (E1)/(E2): H must keep growing as m -> 0 (resp. falling as m -> inf) over six decades
    def decades(m_ref, direction):
        m_mid = m_ref * 10.0 ** (3 * direction)
        m_far = m_ref * 10.0 ** (6 * direction)
        vals = []
        for mm in (m_ref, m_mid, m_far):
            mm = np.full(n, mm)
            h = model.hamiltonian(x, p, mm)
            if direction > 0:
                h = h - C0 * np.asarray(c.psi(mm)) * P**g
            vals.append(h)
        sgn = -direction
        early, late = sgn * (vals[1] - vals[0]), sgn * (vals[2] - vals[1])
        return np.minimum(early + late - 1.0, late - 0.1 * early)

    with np.errstate(all="ignore"):
        _record(rep, "E1", decades(box["m_min"], -1), pts)
        _record(rep, "E2", decades(box["m_max"], +1), pts)
    rep.notes["E1/E2"] = ("coercivity proxy: the change over six decades beyond the box must exceed 1 "
                          "and the last three decades must keep at least 10% of the first three")
    # (E3)
    _record(rep, "E3", ellipticity_gap(model, x, p, m, stack=st), pts, MATRIX_TOL)
    # exponent condition
    _record(rep, "exponent-condition",
            [min(c.exponent_margin, c.gamma1 - c.gamma2, c.gamma - c.gamma1, c.gamma - 1, c.gamma1)],
            {"gamma": np.array([g]), "gamma1": np.array([g1]), "gamma2": np.array([g2])})
    return rep


# --- bound functions ---------------------------------------------------------------

def _bisect_log(fun, target, increasing=True, lo=M_LO, hi=M_HI, rtol=1e-14):
    """Solve ``fun(m) = target`` for a monotone scalar function on [lo, hi] by log-bisection."""
    flo, fhi = fun(lo), fun(hi)
    if increasing:
        inside = flo <= target <= fhi
    else:
        inside = fhi <= target <= flo
    if not inside:
        return None
    a, b = math.log(lo), math.log(hi)
    while b - a > rtol:
        mid = 0.5 * (a + b)
        v = fun(math.exp(mid))
        if (v < target) == increasing:
            a = mid
        else:
            b = mid
    return math.exp(0.5 * (a + b))


def radial_p_grid(d: int, n_radii: int = 64, p_max: float = 1e3) -> np.ndarray:
    radii = np.concatenate([[0.0], np.logspace(-3, np.log10(p_max), n_radii)])
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        ang = np.arange(8) * np.pi / 4
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts = (radii[:, None, None] * dirs[None]).reshape(-1, d)
    return np.unique(np.round(pts, 15), axis=0)


class BoundFunctions:
    """f0, f1, g0, g1, their inverses, h(s) and delta_K for one model.

    ``closed_form=False`` forces the numeric density inversion in delta_K.
    """

    def __init__(self, model: Model, nx: int = 64, closed_form: bool = True):
        self.model = model
        self.d = model.d
        self.xs = torus_nodes(model.d, nx if model.d == 1 else min(nx, 32))
        self.ps = radial_p_grid(model.d)
        self.closed_form = closed_form
        self.h_flag = None

    def _neg_H0(self, m):
        x = self.xs
        with np.errstate(all="ignore"):
            return -self.model.hamiltonian(x, np.zeros_like(x), np.full(x.shape[0], float(m)))

    def f0(self, m):
        return float(np.min(self._neg_H0(m)))

    def f1(self, m):
        return float(np.max(self._neg_H0(m)))

    def _g(self, m):
        x = self.xs
        return self.model.terminal(x, np.full(x.shape[0], float(m)))[0]

    def g0(self, m):
        return float(np.min(self._g(m)))

    def g1(self, m):
        return float(np.max(self._g(m)))

    def _inv(self, fname, y):
        m = _bisect_log(getattr(self, fname), float(y))
        if m is None:
            raise BoundRangeError(f"{fname}^-1({y:.6g}) is undefined: argument outside the range of {fname} "
                                  f"on [{M_LO:g}, {M_HI:g}]")
        return m

    def f0_inv(self, y):
        return self._inv("f0", y)

    def f1_inv(self, y):
        return self._inv("f1", y)

    def g0_inv(self, y):
        return self._inv("g0", y)

    def g1_inv(self, y):
        return self._inv("g1", y)

    def coercive_sup(self, m):
        """sup over sampled (x, p) of H(x, p, m) - C0 psi(m) |p|^gamma."""
        c = self.model.constants
        X = np.repeat(self.xs, self.ps.shape[0], axis=0)
        P = np.tile(self.ps, (self.xs.shape[0], 1))
        mm = np.full(X.shape[0], float(m))
        with np.errstate(all="ignore"):
            v = (self.model.hamiltonian(X, P, mm)
                 - c.C0 * np.asarray(c.psi(mm)) * np.linalg.norm(P, axis=1) ** c.gamma)
        v = v[np.isfinite(v)]
        return float(np.max(v)) if v.size else -math.inf

    def h(self, s):
        """sup{m : coercive_sup(m) >= -s}; sets ``h_flag`` for the degenerate ends."""
        self.h_flag = None
        grid = np.geomspace(M_LO, M_HI, 97)
        ok = np.array([self.coercive_sup(mm) >= -s for mm in grid])
        if not ok.any():
            self.h_flag = "empty"
            return 0.0
        k = int(np.flatnonzero(ok)[-1])
        if k == grid.size - 1:
            self.h_flag = "unbounded"
            return math.inf
        a, b = math.log(grid[k]), math.log(grid[k + 1])
        while b - a > 1e-14:
            mid = 0.5 * (a + b)
            if self.coercive_sup(math.exp(mid)) >= -s:
                a = mid
            else:
                b = mid
        return math.exp(0.5 * (a + b))

    def delta(self, K):
        """inf over sampled (x, p) and s <= K of H^-1(x, p, s); attained at s = K."""
        X = np.repeat(self.xs, self.ps.shape[0], axis=0)
        P = np.tile(self.ps, (self.xs.shape[0], 1))
        n = X.shape[0]
        with np.errstate(all="ignore"):
            h_top = self.model.hamiltonian(X, P, np.full(n, M_HI))
            h_bot = self.model.hamiltonian(X, P, np.full(n, MIN_DENSITY))
        if np.any(h_bot < K):
            return MIN_DENSITY
        # roots above M_HI cannot be the minimum unless every root is there
        keep = ~(h_top > K)
        if not keep.any():
            return M_HI
        m = invert_H(self.model, X[keep], P[keep], np.full(int(keep.sum()), float(K)),
                     closed_form=self.closed_form)
        return float(np.min(m))

    def psi_sup(self, lo):
        """max of psi on [lo, inf) (psi is non-increasing, so this is psi(lo) up to sampling)."""
        m = np.geomspace(lo, max(M_HI, 10 * lo), 200)
        return float(np.max(self.model.constants.psi(m)))


def bound_functions(model: Model, nx: int = 64, closed_form: bool = True) -> BoundFunctions:
    return BoundFunctions(model, nx=nx, closed_form=closed_form)


def apriori_bounds(model: Model, C: float, T: float, t, bounds: BoundFunctions | None = None):
    """A-priori lower and upper bounds on u(x, t) for the constant C."""
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    bf = bounds or bound_functions(model)
    t = np.asarray(t, dtype=float)
    growth = C * (np.exp(C * T) - np.exp(C * t))
    lower = bf.g0(bf.f1_inv(-C)) - growth
    upper = bf.g1(bf.f0_inv(C)) + growth
    return lower, upper


def mT_interval(model: Model, C: float, bounds: BoundFunctions | None = None):
    """A-priori interval for the terminal density m(., T)."""
    bf = bounds or bound_functions(model)
    lower = bf.g1_inv(bf.g0(bf.f1_inv(-C)))
    upper = bf.g0_inv(bf.g1(bf.f0_inv(C)))
    return lower, upper


# --- solution monitors ---------------------------------------------------------------

def mfg_residual(model: Model, grid: SpaceTimeGrid, u, m):
    """``(hjb_norm, continuity_norm)`` of the original system at the discrete solution.

    hjb_norm is the max of |-u_t + H(x, D_x u, m)| over all nodes; continuity_norm
    is the max of |m_t - div_x B(x, D_x u, m)| over interior nodes (centred differences).
    """
    u = np.asarray(u, dtype=float).ravel()
    m = np.asarray(m, dtype=float).ravel()
    d = grid.d
    G = grid.gradient(u)
    X = grid.x_nodes
    hjb = -G[:, d] + model.hamiltonian(X, G[:, :d], m)
    B = np.asarray(model.flux(X, G[:, :d], m)).reshape(grid.size, d)
    ops = grid.gradient_operators()
    cont = ops[d] @ m - sum(ops[k] @ B[:, k] for k in range(d))
    return float(np.max(np.abs(hjb))), float(np.max(np.abs(cont[grid.interior])))


@dataclass
class CertificateReport:
    checks: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": dict(self.checks), "values": _jsonable(self.values)}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def apriori_holds(model, grid, u, m, C, bounds) -> bool:
    try:
        lo, hi = apriori_bounds(model, C, grid.T, grid.t_nodes, bounds=bounds)
        mlo, mhi = mT_interval(model, C, bounds=bounds)
    except BoundRangeError:
        return False
    mT = m[grid.terminal]
    return bool(np.all(u >= lo) and np.all(u <= hi) and np.all(mT >= mlo) and np.all(mT <= mhi))


def smallest_apriori_C(model, grid, u, m, Cmax, bounds=None):
    """Smallest C in (0, Cmax] (to 2 decimals, rounded up) for which both bounds hold, else None."""
    bf = bounds or bound_functions(model)
    if not apriori_holds(model, grid, u, m, Cmax, bf):
        return None
    lo, hi = 0.0, float(Cmax)
    while hi - lo > 2.5e-3:
        mid = 0.5 * (lo + hi)
        if apriori_holds(model, grid, u, m, mid, bf):
            hi = mid
        else:
            lo = mid
    C = math.ceil(hi * 100 - 1e-9) / 100
    return min(C, float(Cmax)) if apriori_holds(model, grid, u, m, C, bf) else hi


def boundary_obliqueness(model: Model, grid: SpaceTimeGrid, u):
    """dN/ds at every node of the t = 0 and t = T layers."""
    u = np.asarray(u, dtype=float).ravel()
    G = grid.gradient(u)
    d = grid.d
    X = grid.x_nodes
    out = []
    for initial, rows in ((True, grid.initial), (False, grid.terminal)):
        out.append(boundary_values(model, initial, X[rows], G[rows, :d], G[rows, d], u[rows])[3])
    return out[0], out[1]


def certify(model: Model, grid: SpaceTimeGrid, u, m=None, search_Cmax: float = 10.0,
            bounds: BoundFunctions | None = None) -> CertificateReport:
    """Check a computed solution against the a-priori structure of the problem."""
    u = np.array(u, dtype=float).ravel()
    m = recover_m(model, grid, u) if m is None else np.array(m, dtype=float).ravel()
    bf = bounds or bound_functions(model)
    rep = CertificateReport()
    c = model.constants
    d = grid.d
    G = grid.gradient(u)

    means = grid.trapezoid_mean(m)
    drift = float(np.max(np.abs(means - 1.0)))
    rep.values["mass_drift"] = drift
    rep.checks["mass_drift"] = drift <= 1e-2
    rep.values["positivity_margin"] = float(m.min())
    rep.checks["positivity"] = bool(m.min() > 0)

    hjb, cont = mfg_residual(model, grid, u, m)
    s_max = float(np.max(np.abs(G[:, d])))
    rep.values["mfg_residual"] = {"hjb": hjb, "continuity": cont}
    rep.checks["hjb_consistency"] = hjb <= 10 * INVERSION_RTOL * (1 + s_max)

    # global density bounds from the observed gradient
    K = float(np.max(np.linalg.norm(G, axis=1)))
    Kx = float(np.max(np.linalg.norm(G[:, :d], axis=1)))
    delta = bf.delta(K)
    C1 = K + c.C0 * bf.psi_sup(delta) * Kx**c.gamma
    h_C1 = bf.h(C1)
    rep.values["density_bounds"] = {"K": K, "Dx_norm": Kx, "delta_K": delta, "C1": C1,
                                    "h_C1": h_C1, "h_flag": bf.h_flag,
                                    "m_min": float(m.min()), "m_max": float(m.max())}
    rep.checks["density_bounds"] = bool(delta <= m.min() and m.max() <= h_C1)

    # smallest C for which the u bounds and the terminal density interval hold
    C = smallest_apriori_C(model, grid, u, m, search_Cmax, bf)
    entry = {"search_Cmax": search_Cmax, "smallest_C": C}
    if C is not None:
        lo, hi = apriori_bounds(model, C, grid.T, np.array([0.0, grid.T]), bounds=bf)
        entry.update(u_lower_t0=float(lo[0]), u_upper_t0=float(hi[0]),
                     u_lower_T=float(lo[1]), u_upper_T=float(hi[1]),
                     mT_interval=list(mT_interval(model, C, bounds=bf)))
    entry.update(u_min=float(u.min()), u_max=float(u.max()),
                 mT_min=float(m[grid.terminal].min()), mT_max=float(m[grid.terminal].max()))
    rep.values["apriori_bounds"] = entry
    rep.checks["apriori_bounds"] = C is not None

    gap = ellipticity_gap(model, grid.x_nodes, G[:, :d], m)
    rep.values["min_ellipticity_gap"] = float(np.min(gap))
    i = int(np.argmin(gap))
    rep.values["min_gap_node"] = {"t": float(grid.t_nodes[i]), "x": grid.x_nodes[i].tolist()}
    rep.checks["ellipticity"] = bool(np.min(gap) > 0)

    ds0, dsT = boundary_obliqueness(model, grid, u)
    rep.values["obliqueness"] = {"max_dN_ds_initial": float(ds0.max()), "min_dN_ds_terminal": float(dsT.min())}
    rep.checks["obliqueness"] = bool(np.all(ds0 < 0) and np.all(dsT > 0))
    return rep


# --- self-convergence ----------------------------------------------------------------

@dataclass
class ConvergenceReport:
    grids: list
    diffs_u: list
    diffs_m: list
    order_u: object
    order_m: object
    continuity: list
    continuity_ratios: list

    def to_dict(self):
        return _jsonable(asdict(self))


def _order(e1, e2):
    if e1 < 1e-12 and e2 < 1e-12:
        return "exact"
    if e2 <= 0:
        return math.inf
    return math.log2(e1 / e2)


def restrict(fine: SpaceTimeGrid, coarse: SpaceTimeGrid, values) -> np.ndarray:
    """Sample a fine-grid field at the nodes of a nested coarse grid."""
    if fine.Nx % coarse.Nx or fine.Nt % coarse.Nt or fine.d != coarse.d or fine.T != coarse.T:
        raise ValueError("grids are not nested")
    rx, rt = fine.Nx // coarse.Nx, fine.Nt // coarse.Nt
    v = np.asarray(values).reshape(fine.shape)
    sl = (slice(None, None, rt),) + (slice(None, None, rx),) * fine.d
    return v[sl].ravel()


def self_convergence(model: Model, grids, cfg: ContinuationConfig | None = None) -> ConvergenceReport:
    """Observed orders for u and m over at least three nested grids (norms on the coarsest nodes)."""
    grids = list(grids)
    if len(grids) < 3:
        raise ValueError("self-convergence needs at least three nested grids")
    sols, conts = [], []
    for g in grids:
        u, _ = continuation_solve(model, g, cfg)
        m = recover_m(model, g, u)
        sols.append((u, m))
        conts.append(mfg_residual(model, g, u, m)[1])
    base = grids[0]
    du, dm = [], []
    for k in range(len(grids) - 1):
        a = [restrict(grids[k], base, f) for f in sols[k]]
        b = [restrict(grids[k + 1], base, f) for f in sols[k + 1]]
        du.append(float(np.max(np.abs(a[0] - b[0]))))
        dm.append(float(np.max(np.abs(a[1] - b[1]))))
    order_u = [_order(du[k], du[k + 1]) for k in range(len(du) - 1)]
    order_m = [_order(dm[k], dm[k + 1]) for k in range(len(dm) - 1)]
    ratios = [conts[k] / conts[k + 1] if conts[k + 1] > 0 else math.inf for k in range(len(conts) - 1)]
    return ConvergenceReport(
        grids=[{"d": g.d, "Nx": g.Nx, "Nt": g.Nt, "T": g.T} for g in grids],
        diffs_u=du, diffs_m=dm,
        order_u=order_u[0] if len(order_u) == 1 else order_u,
        order_m=order_m[0] if len(order_m) == 1 else order_m,
        continuity=conts, continuity_ratios=ratios)
