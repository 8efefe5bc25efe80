"""Damped Newton for the discrete oblique problem, theta-continuation, density recovery."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .discretization import SpaceTimeGrid, evaluate, jacobian_from
from .errors import (ConfigError, ContinuationStall, InversionError, LinearSolveError,
                     MaxIterationsError, ModelEvaluationError, NewtonError,
                     NewtonInversionError, StepUnderflowError)
from .models import B_FIELDS, H_FIELDS, Model
from .reformulation import ellipticity_gap, invert_H

# derivative fields that vanish for the x-frozen part of a blend
_X_FIELDS = {"H_x", "H_xp", "H_xm", "H_xx", "B_x", "divB", "B_xm", "B_xp", "B_xx"}


@dataclass
class ContinuationConfig:
    dtheta_init: float = 0.1
    dtheta_max: float = 0.25
    max_halvings: int = 8
    newton_tol: float = 1e-9
    newton_max_iter: int = 30
    armijo_c: float = 1e-4
    armijo_min_step: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ConfigError(f"continuation setting {k} must be positive, got {v}")
        if self.dtheta_init > self.dtheta_max:
            raise ConfigError(f"dtheta_init={self.dtheta_init} exceeds dtheta_max={self.dtheta_max}")
        if self.dtheta_max > 1:
            raise ConfigError("dtheta_max must not exceed 1")


# --- theta family -------------------------------------------------------------------

class BlendedModel(Model):
    """Convex blend of a model with its x-frozen copy at the origin.

    H = theta H(x, p, m) + (1 - theta) H(0, p, m), the same for B; the terminal
    cost is blended with g = m and the initial density with m0 = 1.
    """

    def __init__(self, base: Model, theta: float):
        super().__init__(base.d, base.constants)
        self.base = base
        self.theta = float(theta)
        self.name = f"{base.name}@theta={self.theta:g}"
        if base.log_coupled and base.closed_form_inverse is not None:
            self.log_coupled = True
            self.closed_form_inverse = self._blend_inverse

    def params(self):
        return {"base": self.base, "theta": self.theta}

    def _stack(self, x, p, m):
        th = self.theta
        full = self.base._stack(x, p, m)
        frozen = self.base._stack(np.zeros_like(x), p, m)
        return {k: (th * full[k] if k in _X_FIELDS else th * full[k] + (1 - th) * frozen[k])
                for k in H_FIELDS + B_FIELDS}

    def hamiltonian(self, x, p, m):
        th = self.theta
        return th * self.base.hamiltonian(x, p, m) + (1 - th) * self.base.hamiltonian(np.zeros_like(x), p, m)

    def hamiltonian_m(self, x, p, m):
        th = self.theta
        return (th * self.base.hamiltonian_m(x, p, m)
                + (1 - th) * self.base.hamiltonian_m(np.zeros_like(x), p, m))

    def flux(self, x, p, m):
        th = self.theta
        return th * self.base.flux(x, p, m) + (1 - th) * self.base.flux(np.zeros_like(x), p, m)

    def _blend_inverse(self, x, p, s):
        # H = F(x,p) - log m, so log H^-1 blends linearly
        th = self.theta
        inv = self.base.closed_form_inverse
        return np.exp(th * np.log(inv(x, p, s)) + (1 - th) * np.log(inv(np.zeros_like(x), p, s)))

    def terminal(self, x, m):
        th = self.theta
        g, gm, gx = self.base.terminal(x, m)
        return th * g + (1 - th) * np.asarray(m, dtype=float), th * gm + (1 - th), th * gx

    def initial_density(self, x):
        th = self.theta
        m0, m0x = self.base.initial_density(x)
        return th * m0 + (1 - th), th * m0x


def theta_model(model: Model, theta: float) -> Model:
    """Member of the continuation family; ``theta = 1`` returns ``model`` itself."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if theta == 1.0:
        return model
    return BlendedModel(model, theta)


def base_solution(model: Model, grid: SpaceTimeGrid) -> np.ndarray:
    """Exact solution of the theta = 0 problem: u = (t - T) H(0, 0, 1) + 1 (m = 1)."""
    d = model.d
    h0 = float(np.atleast_1d(model.hamiltonian(np.zeros((1, d)), np.zeros((1, d)), np.ones(1)))[0])
    return (grid.t_nodes - grid.T) * h0 + 1.0


def recover_m(model: Model, grid: SpaceTimeGrid, u) -> np.ndarray:
    """m = H^-1(x, D_x u, u_t) at every node."""
    u = np.asarray(u, dtype=float).ravel()
    G = grid.gradient(u)
    try:
        return np.atleast_1d(invert_H(model, grid.x_nodes, G[:, :grid.d], G[:, grid.d]))
    except InversionError as err:
        i = int(err.index[0])
        t, x = grid.node(i)
        raise type(err)(f"{err} [node {i}: t={t:.6g}, x={x}]", index=err.index, x=err.x,
                        p=err.p, s=err.s, node=(i, t, x)) from err


# --- Newton ----------------------------------------------------------------------------

@dataclass
class NewtonReport:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    converged: bool = False


def _row_scale(J):
    absJ = abs(J)
    return 1.0 + absJ.max(axis=1).toarray().ravel()


def _solve_linear(J, rhs, u, report):
    try:
        lu = spla.splu(J.tocsc())
        delta = lu.solve(rhs)
        # one refinement pass keeps the relative residual near machine precision
        r = rhs - J @ delta
        delta = delta + lu.solve(r)
    except (RuntimeError, ValueError) as err:
        raise LinearSolveError(f"sparse factorisation failed: {err}", u=u, report=report) from err
    if not np.all(np.isfinite(delta)):
        raise LinearSolveError("linear solve returned non-finite values", u=u, report=report)
    rel = np.linalg.norm(rhs - J @ delta) / max(np.linalg.norm(rhs), 1e-300)
    if rel > 1e-8:
        raise LinearSolveError(f"linear solve relative residual {rel:.2e}", u=u, report=report)
    return delta


def newton_solve(model: Model, grid: SpaceTimeGrid, u0, cfg: ContinuationConfig | None = None,
                 forcing=None):
    """Damped Newton on the residual; returns ``(u, report)``.

    Rows are scaled by ``1 + max_j |J_ij|`` (frozen during the line search) and
    convergence is measured in the scaled max-norm.
    """
    cfg = cfg or ContinuationConfig()
    u = np.array(u0, dtype=float).ravel()
    report = NewtonReport()
    try:
        ev = evaluate(model, grid, u, forcing=forcing, keep=True)
    except ModelEvaluationError as err:
        raise NewtonInversionError(f"initial iterate is not admissible: {err}", u=u, report=report) from err
    while True:
        J = jacobian_from(grid, ev)
        scale = _row_scale(J)
        r = float(np.max(np.abs(ev.F / scale)))
        report.residuals.append(r)
        if r <= cfg.newton_tol:
            report.converged = True
            return u, report
        if report.iterations >= cfg.newton_max_iter:
            raise MaxIterationsError(
                f"no convergence in {cfg.newton_max_iter} iterations (residual {r:.3e})", u=u, report=report)
        delta = _solve_linear(J, -ev.F, u, report)
        lam = 1.0
        while True:
            trial = u + lam * delta
            try:
                ev_t = evaluate(model, grid, trial, forcing=forcing, keep=True)
                r_t = float(np.max(np.abs(ev_t.F / scale)))
                ok = r_t <= (1.0 - cfg.armijo_c * lam) * r
            except ModelEvaluationError:
                ok = False
            if ok:
                break
            lam *= 0.5
            if lam < cfg.armijo_min_step:
                raise StepUnderflowError(
                    f"Armijo step fell below {cfg.armijo_min_step} (residual {r:.3e})", u=u, report=report)
        u, ev = trial, ev_t
        report.steps.append(lam)
        report.iterations += 1


# --- continuation ----------------------------------------------------------------------

@dataclass
class TraceEntry:
    theta: float
    iters: int
    residual: float
    min_m: float
    max_m: float
    max_grad: float
    min_gap: float


@dataclass
class ContinuationTrace:
    entries: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def thetas(self):
        return [e.theta for e in self.entries]

    @property
    def min_gap(self) -> float:
        return min(e.min_gap for e in self.entries) if self.entries else float("nan")

    def to_list(self):
        return [asdict(e) for e in self.entries]

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_list(), **kw)


def solution_monitors(model: Model, grid: SpaceTimeGrid, u):
    """``(m, min_m, max_m, max|Du|, min ellipticity gap)`` over all nodes."""
    m = recover_m(model, grid, u)
    G = grid.gradient(u)
    gap = ellipticity_gap(model, grid.x_nodes, G[:, :grid.d], m)
    return m, float(m.min()), float(m.max()), float(np.max(np.linalg.norm(G, axis=1))), float(np.min(gap))


def continuation_solve(model: Model, grid: SpaceTimeGrid, cfg: ContinuationConfig | None = None,
                       on_step=None):
    """Follow the theta family from the exact base solution to theta = 1.

    Returns ``(u, trace)``.  ``on_step(entry, u)`` is called after every accepted step.
    Raises :class:`ContinuationStall` when dtheta would drop below
    ``dtheta_init / 2**max_halvings``; the floor also bounds the number of steps.
    """
    cfg = cfg or ContinuationConfig()
    start = time.perf_counter()
    trace = ContinuationTrace()

    def accept(theta, mdl, u, rep):
        _, mn, mx, g, gap = solution_monitors(mdl, grid, u)
        entry = TraceEntry(theta, rep.iterations, rep.residuals[-1], mn, mx, g, gap)
        trace.entries.append(entry)
        if on_step is not None:
            on_step(entry, u)

    m0 = theta_model(model, 0.0)
    u, rep = newton_solve(m0, grid, base_solution(model, grid), cfg)
    accept(0.0, m0, u, rep)
    theta, dtheta = 0.0, cfg.dtheta_init
    floor = cfg.dtheta_init * 0.5**cfg.max_halvings
    successes = 0
    while theta < 1.0:
        target = theta + dtheta
        target = 1.0 if target > 1.0 - 1e-12 else target
        mdl = theta_model(model, target)
        try:
            u_new, rep = newton_solve(mdl, grid, u, cfg)
        except NewtonError:
            successes = 0
            dtheta *= 0.5
            if dtheta < floor * (1 - 1e-12):
                trace.elapsed = time.perf_counter() - start
                raise ContinuationStall(
                    f"continuation stalled at theta={theta:.6g}: dtheta fell below {floor:.3g}",
                    theta=theta, u=u, trace=trace)
            continue
        theta, u = target, u_new
        successes += 1
        accept(theta, mdl, u, rep)
        if successes >= 2:
            dtheta = min(2 * dtheta, cfg.dtheta_max)
            successes = 0
    trace.elapsed = time.perf_counter() - start
    return u, trace
