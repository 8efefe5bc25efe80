"""Pointwise data of the quasilinear space-time operator.

Eliminating the density through ``m = H^{-1}(x, p, s)`` turns the coupled
system into ``-tr(A(x, Du) D^2u) + b(x, Du) = 0`` with nonlinear oblique
boundary operators.  Everything here is vectorised over a batch of points and
works with the index conventions documented in :mod:`emfg.models`.

The gradient variable is ``q = (p, s)`` with ``p = D_x u`` and ``s = u_t``;
space-time matrices are ``(d+1) x (d+1)`` with time as the last index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoercivityError, InversionError, ModelEvaluationError
from .models import MIN_DENSITY, Model, Stack, as_batch, eval_stack

INVERSION_RTOL = 1e-11
_MAX_EXPANSIONS = 200
_BISECT_RWIDTH = 1e-13


@dataclass
class GradientPoint:
    """Value of ``(x, D_x u, u_t, u)`` at a point of the space-time cylinder."""

    x: np.ndarray
    p: np.ndarray
    s: float
    z: float = 0.0


# --- inversion of m -> H(x, p, m) ----------------------------------------------

def _h_minus_s(model, x, p, m, s):
    with np.errstate(all="ignore"):
        val = model.hamiltonian(x, p, m) - s
    return val


def invert_H_numeric(model: Model, x, p, s, m_guess=None) -> np.ndarray:
    """Monotone bracketing + log-bisection + Newton polish (batched).

    Returns the unique ``m`` with ``H(x, p, m) = s``.  Raises
    :class:`InversionError` when the root lies below ``MIN_DENSITY`` and
    :class:`CoercivityError` when no bracket is found after 200 doublings.
    """
    n = x.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=float), (n,))
    guess = np.ones(n) if m_guess is None else np.clip(np.broadcast_to(m_guess, (n,)), 1e-8, 1e8)
    lo = guess.copy()
    hi = guess.copy()
    f = _h_minus_s(model, x, p, guess, s)
    if not np.all(np.isfinite(f)):
        i = int(np.argmax(~np.isfinite(f)))
        raise InversionError(f"H is not finite at the starting density {guess[i]}", index=i,
                             x=x[i], p=p[i], s=s[i])
    # H decreasing in m: f > 0 means the root lies above the guess.
    up = f > 0
    down = ~up
    failed_floor = np.zeros(n, dtype=bool)
    for _ in range(_MAX_EXPANSIONS):
        if not (up.any() or down.any()):
            break
        if up.any():
            lo[up] = hi[up]
            hi[up] *= 2.0
            still = _h_minus_s(model, x[up], p[up], hi[up], s[up]) > 0
            idx = np.flatnonzero(up)
            up[idx[~still]] = False
        if down.any():
            hi[down] = lo[down]
            lo[down] *= 0.5
            still = _h_minus_s(model, x[down], p[down], lo[down], s[down]) < 0
            idx = np.flatnonzero(down)
            below = lo[idx] < MIN_DENSITY
            failed_floor[idx[still & below]] = True
            down[idx[~still | below]] = False
    if failed_floor.any():
        i = int(np.argmax(failed_floor))
        raise InversionError(
            f"density root below floor {MIN_DENSITY} at x={x[i]}, p={p[i]}, s={s[i]}",
            index=np.flatnonzero(failed_floor), x=x[i], p=p[i], s=s[i])
    if up.any() or down.any():
        bad = up | down
        i = int(np.argmax(bad))
        raise CoercivityError(
            f"no bracket for H(x,p,m) = s after {_MAX_EXPANSIONS} expansions at "
            f"x={x[i]}, p={p[i]}, s={s[i]}", index=np.flatnonzero(bad), x=x[i], p=p[i], s=s[i])

    # bisection in log m down to relative bracket width 1e-13
    width = np.max(np.log(hi / lo))
    steps = int(np.ceil(np.log2(max(width, 1e-300) / _BISECT_RWIDTH))) + 1
    for _ in range(max(steps, 0)):
        mid = np.sqrt(lo * hi)
        pos = _h_minus_s(model, x, p, mid, s) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    m = np.sqrt(lo * hi)

    # Newton polish, accepted only where it reduces |H - s| inside the bracket
    r = _h_minus_s(model, x, p, m, s)
    for _ in range(3):
        with np.errstate(all="ignore"):
            trial = m - r / model.hamiltonian_m(x, p, m)
        ok = np.isfinite(trial) & (trial >= lo * (1 - 1e-12)) & (trial <= hi * (1 + 1e-12))
        rt = np.where(ok, _h_minus_s(model, x, p, np.where(ok, trial, m), s), np.inf)
        better = ok & (np.abs(rt) < np.abs(r))
        if not better.any():
            break
        m = np.where(better, trial, m)
        r = np.where(better, rt, r)
    if np.any(m < MIN_DENSITY):
        bad = m < MIN_DENSITY
        i = int(np.argmax(bad))
        raise InversionError(f"density root {m[i]} below floor {MIN_DENSITY}",
                             index=np.flatnonzero(bad), x=x[i], p=p[i], s=s[i])
    return m


def invert_H(model: Model, x, p, s, m_guess=None, closed_form: bool = True):
    """Solve ``H(x, p, m) = s`` for ``m`` at a point or a batch of points."""
    (x, p), single = as_batch(x, p, d=model.d)
    s_arr = np.broadcast_to(np.asarray(s, dtype=float).reshape(-1), (x.shape[0],))
    if closed_form and model.closed_form_inverse is not None:
        with np.errstate(all="ignore"):
            m = np.asarray(model.closed_form_inverse(x, p, s_arr), dtype=float)
        bad = ~(m >= MIN_DENSITY) | ~np.isfinite(m)
        if bad.any():
            i = int(np.argmax(bad))
            raise InversionError(
                f"density root {m[i]} outside [{MIN_DENSITY}, inf) at x={x[i]}, p={p[i]}, s={s_arr[i]}",
                index=np.flatnonzero(bad), x=x[i], p=p[i], s=s_arr[i])
    else:
        m = invert_H_numeric(model, x, p, s_arr, m_guess)
    return float(m[0]) if single else m


# --- assembly -------------------------------------------------------------------

@dataclass
class ReformAssembly:
    """Pointwise operator data at a batch of gradient values.

    ``A`` is the symmetrised matrix; ``A_raw`` keeps the unsymmetrised form.
    ``zeta`` holds the coefficients of the linear form
    ``zeta(p_hat, s_hat) = -s_hat + D_pH . p_hat`` as a ``(n, d+1)`` array and
    ``dm_dq = -zeta / H_m`` is the derivative of the inverted density in q.
    """

    x: np.ndarray
    p: np.ndarray
    s: np.ndarray
    m: np.ndarray
    stack: Stack
    A: np.ndarray
    A_raw: np.ndarray
    b: np.ndarray
    Yplus: np.ndarray
    Yminus: np.ndarray
    zeta: np.ndarray
    dm_dq: np.ndarray

    @property
    def d(self):
        return self.x.shape[1]


def assemble(model: Model, x, p, s, m_guess=None) -> ReformAssembly:
    """Batched assembly of A, b and the shared quantities Y+, Y-, zeta."""
    (x, p), _ = as_batch(x, p, d=model.d)
    n, d = x.shape
    s = np.broadcast_to(np.asarray(s, dtype=float).reshape(-1), (n,))
    m = np.atleast_1d(invert_H(model, x, p, s, m_guess=m_guess))
    st = eval_stack(model, x, p, m)
    Yp = st.B_m + st.H_p
    Ym = st.B_m - st.H_p
    D = d + 1
    A_raw = np.zeros((n, D, D))
    w = np.concatenate([0.5 * Yp, -np.ones((n, 1))], axis=1)
    A_raw += np.einsum("ni,nj->nij", w, w)
    A_raw[:, :d, :d] -= 0.25 * np.einsum("ni,nj->nij", Ym, Ym) + st.H_m[:, None, None] * st.B_p
    A = 0.5 * (A_raw + np.swapaxes(A_raw, 1, 2))
    b = -np.einsum("ni,ni->n", st.H_x, st.B_m) + st.H_m * st.divB
    zeta = np.concatenate([st.H_p, -np.ones((n, 1))], axis=1)
    dm_dq = -zeta / st.H_m[:, None]
    return ReformAssembly(x=x, p=p, s=s, m=m, stack=st, A=A, A_raw=A_raw, b=b, Yplus=Yp,
                          Yminus=Ym, zeta=zeta, dm_dq=dm_dq)


def _assemble_gp(model, gp: GradientPoint) -> ReformAssembly:
    return assemble(model, np.atleast_1d(gp.x), np.atleast_1d(gp.p), gp.s)


def assemble_A(model: Model, gp: GradientPoint) -> np.ndarray:
    """Symmetrised (d+1) x (d+1) matrix A at one gradient point."""
    return _assemble_gp(model, gp).A[0]


def assemble_b(model: Model, gp: GradientPoint) -> float:
    """First-order term b = -D_xH . B_m + H_m div_x B at one gradient point."""
    return float(_assemble_gp(model, gp).b[0])


# --- boundary operator ------------------------------------------------------------

def _is_initial(t_face) -> bool:
    return isinstance(t_face, str) and t_face == "initial" or (not isinstance(t_face, str) and t_face == 0)


def boundary_values(model: Model, initial: bool, x, p, s, z, m_guess=None):
    """Batched boundary operator N and its gradient ``(dN/dz, dN/dp, dN/ds)``.

    At t = 0: ``N = -s + H(x, p, m0(x))``; at t = T: ``N = -g(x, H^{-1}(x, p, s)) + z``.
    """
    (x, p), _ = as_batch(x, p, d=model.d)
    n = x.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=float).reshape(-1), (n,))
    z = np.broadcast_to(np.asarray(z, dtype=float).reshape(-1), (n,))
    if initial:
        m0 = model.initial_density(x)[0]
        st = eval_stack(model, x, p, m0)
        N = -s + st.H
        return N, np.zeros(n), st.H_p, -np.ones(n)
    m = np.atleast_1d(invert_H(model, x, p, s, m_guess=m_guess))
    g, g_m, _ = model.terminal(x, m)
    st = eval_stack(model, x, p, m)
    N = -g + z
    dN_ds = -g_m / st.H_m
    dN_dp = (g_m / st.H_m)[:, None] * st.H_p
    return N, np.ones(n), dN_dp, dN_ds


def boundary_N(model: Model, t_face, gp: GradientPoint) -> float:
    """Boundary operator at ``t_face`` (0 for the initial face, anything else for t = T)."""
    return float(boundary_values(model, _is_initial(t_face), np.atleast_1d(gp.x),
                                 np.atleast_1d(gp.p), gp.s, gp.z)[0][0])


def boundary_N_gradient(model: Model, t_face, gp: GradientPoint):
    """``(dN/dz, dN/dp, dN/ds)`` at one gradient point."""
    _, dz, dp, ds = boundary_values(model, _is_initial(t_face), np.atleast_1d(gp.x),
                                    np.atleast_1d(gp.p), gp.s, gp.z)
    return float(dz[0]), dp[0], float(ds[0])


# --- ellipticity ------------------------------------------------------------------

def ellipticity_gap(model: Model, x, p, m, stack: Stack | None = None):
    """Smallest eigenvalue of sym(-4 H_m D_pB - (1 + 1/C0) Y- (x) Y-)."""
    if stack is None:
        (xb, pb, mb), single = as_batch(x, p, m, d=model.d)
        stack = eval_stack(model, xb, pb, mb)
    else:
        single = False
    Ym = stack.B_m - stack.H_p
    c = 1.0 + 1.0 / model.constants.C0
    M = -4.0 * stack.H_m[:, None, None] * stack.B_p - c * np.einsum("ni,nj->nij", Ym, Ym)
    M = 0.5 * (M + np.swapaxes(M, 1, 2))
    lam = np.linalg.eigvalsh(M)[:, 0]
    return float(lam[0]) if single else lam


# --- linearisation ------------------------------------------------------------------

def _split_hessian(hess, d):
    Mxx = hess[:, :d, :d]
    Mxt = hess[:, :d, d]
    return Mxx, Mxt


def _directional(asm: ReformAssembly, dX_dp, X_m):
    """Total q-derivative of X(x, p, H^{-1}(x, p, s)) as an array ``(..., d+1)``.

    ``dX_dp`` carries the explicit p-derivative in its last axis, ``X_m`` the
    m-derivative; the density moves by ``dm/dq = -zeta / H_m``.
    """
    n = asm.m.shape[0]
    shape = dX_dp.shape[:-1]
    out = np.zeros(shape + (asm.d + 1,))
    out[..., :asm.d] = dX_dp
    out += X_m[..., None] * asm.dm_dq.reshape((n,) + (1,) * (len(shape) - 1) + (asm.d + 1,))
    return out


def d_trace_A(asm: ReformAssembly, hess) -> np.ndarray:
    """Coefficients c with ``D_q tr(A D^2u) . q = c . q``, shape ``(n, d+1)``."""
    st, d = asm.stack, asm.d
    hess = np.asarray(hess, dtype=float).reshape(-1, d + 1, d + 1)
    Mxx, Mxt = _split_hessian(hess, d)
    dYp = _directional(asm, st.B_pm + st.H_pp, st.B_mm + st.H_pm)
    dYm = _directional(asm, st.B_pm - st.H_pp, st.B_mm - st.H_pm)
    dHm = _directional(asm, st.H_pm, st.H_mm)
    dBp = _directional(asm, st.B_pp, st.B_pm)
    lead = -Mxt + 0.5 * np.einsum("ni,nij->nj", asm.Yplus, Mxx)
    lead_m = 0.5 * np.einsum("ni,nij->nj", asm.Yminus, Mxx)
    trBM = np.einsum("nij,nij->n", st.B_p, Mxx)
    dtrBM = np.einsum("nijk,nij->nk", dBp, Mxx)
    return (np.einsum("nj,njk->nk", lead, dYp) - np.einsum("nj,njk->nk", lead_m, dYm)
            - dHm * trBM[:, None] - st.H_m[:, None] * dtrBM)


def d_b(asm: ReformAssembly) -> np.ndarray:
    """Coefficients c with ``D_q b . q = c . q``, shape ``(n, d+1)``."""
    st = asm.stack
    dHx = _directional(asm, st.H_xp, st.H_xm)
    dBm = _directional(asm, st.B_pm, st.B_mm)
    ddivB = _directional(asm, np.einsum("nijk->nj", st.B_xp[..., :, :, :] * _diag_mask(asm.d)),
                         np.trace(st.B_xm, axis1=1, axis2=2))
    dHm = _directional(asm, st.H_pm, st.H_mm)
    return (-np.einsum("ni,nik->nk", st.B_m, dHx) - np.einsum("ni,nik->nk", st.H_x, dBm)
            + st.H_m[:, None] * ddivB + st.divB[:, None] * dHm)


def _diag_mask(d):
    # selects B_xp[i, j, i] (sum over i gives d/dp_j of div_x B)
    mask = np.zeros((d, d, d))
    for i in range(d):
        mask[i, :, i] = 1.0
    return mask


def _x_directional(asm: ReformAssembly, dX_dx, X_m):
    """x-derivative at frozen (p, s): ``dX/dx_i - X_m H_{x_i} / H_m``, last axis i."""
    W = asm.stack.H_x / asm.stack.H_m[:, None]
    n = W.shape[0]
    extra = dX_dx.ndim - 2
    return dX_dx - X_m[..., None] * W.reshape((n,) + (1,) * extra + (asm.d,))


def trace_A_x(asm: ReformAssembly, hess) -> np.ndarray:
    """``tr(A_{x_i} D^2u)`` for i = 1..d at frozen (p, s), shape ``(n, d)``."""
    st, d = asm.stack, asm.d
    hess = np.asarray(hess, dtype=float).reshape(-1, d + 1, d + 1)
    Mxx, Mxt = _split_hessian(hess, d)
    H_px = np.swapaxes(st.H_xp, 1, 2)  # [j, i] = d2H/dp_j dx_i
    dYp = _x_directional(asm, st.B_xm + H_px, st.B_mm + st.H_pm)
    dYm = _x_directional(asm, st.B_xm - H_px, st.B_mm - st.H_pm)
    dHm = _x_directional(asm, st.H_xm, st.H_mm)
    dBp = _x_directional(asm, st.B_xp, st.B_pm)
    lead = -Mxt + 0.5 * np.einsum("ni,nij->nj", asm.Yplus, Mxx)
    lead_m = 0.5 * np.einsum("ni,nij->nj", asm.Yminus, Mxx)
    trBM = np.einsum("nij,nij->n", st.B_p, Mxx)
    dtrBM = np.einsum("nijk,nij->nk", dBp, Mxx)
    return (np.einsum("nj,nji->ni", lead, dYp) - np.einsum("nj,nji->ni", lead_m, dYm)
            - dHm * trBM[:, None] - st.H_m[:, None] * dtrBM)


def dx_b(asm: ReformAssembly, r=None) -> np.ndarray:
    """``D_x b . r`` at frozen (p, s); ``r`` defaults to ``p`` as in the gradient estimate."""
    st = asm.stack
    r = asm.p if r is None else np.broadcast_to(np.asarray(r, dtype=float), asm.p.shape)
    Hxr = np.einsum("ni,ni->n", st.H_x, r)
    w = Hxr / st.H_m
    dHx = np.einsum("nij,nj->ni", st.H_xx, r) - st.H_xm * w[:, None]
    dBm = np.einsum("nij,nj->ni", st.B_xm, r) - st.B_mm * w[:, None]
    ddivB = np.einsum("niik,nk->n", st.B_xx, r) - np.trace(st.B_xm, axis1=1, axis2=2) * w
    dHm = np.einsum("ni,ni->n", st.H_xm, r) - st.H_mm * w
    return (-np.einsum("ni,ni->n", st.B_m, dHx) - np.einsum("ni,ni->n", st.H_x, dBm)
            + st.H_m * ddivB + st.divB * dHm)


def bernstein_rhs(asm: ReformAssembly, hess, phi: str) -> np.ndarray:
    """Right-hand side of ``L_u(Phi(Du))`` for ``Phi = s`` or ``Phi = |p|^2 / 2``.

    Valid where ``Qu = 0`` identically; for a forced equation ``Qu = F`` the
    difference is ``D_q Phi . D F``.
    """
    d = asm.d
    hess = np.asarray(hess, dtype=float).reshape(-1, d + 1, d + 1)
    if phi == "s":
        return np.zeros(hess.shape[0])
    if phi != "half_p2":
        raise ValueError(f"unsupported Phi {phi!r}; use 's' or 'half_p2'")
    rows = hess[:, :d, :]  # Du_{x_i} for i = 1..d
    quad = np.einsum("nij,njk,nik->n", rows, asm.A, rows)
    return -quad + np.einsum("ni,ni->n", trace_A_x(asm, hess), asm.p) - dx_b(asm)


@dataclass
class Linearization:
    """Linear forms of the operator derivative at one gradient point."""

    trace_A: np.ndarray  # D_q tr(A D^2u) . q = trace_A . q
    b: np.ndarray  # D_q b . q = b . q
    trace_A_x: np.ndarray  # tr(A_{x_i} D^2u)
    dx_b: float  # D_x b . p

    def operator(self) -> np.ndarray:
        """First-order coefficients of the linearised operator: ``-trace_A + b``."""
        return -self.trace_A + self.b


def linearization_coefficients(model: Model, gp: GradientPoint, hess) -> Linearization:
    asm = _assemble_gp(model, gp)
    hess = np.asarray(hess, dtype=float).reshape(1, asm.d + 1, asm.d + 1)
    return Linearization(trace_A=d_trace_A(asm, hess)[0], b=d_b(asm)[0],
                         trace_A_x=trace_A_x(asm, hess)[0], dx_b=float(dx_b(asm)[0]))


def pointwise_Q(model: Model, x, p, s, hess) -> np.ndarray:
    """``-tr(A D^2u) + b`` for given gradient and Hessian values (batched)."""
    asm = assemble(model, x, p, s)
    hess = np.asarray(hess, dtype=float).reshape(-1, asm.d + 1, asm.d + 1)
    return -np.einsum("nij,nij->n", asm.A, hess) + asm.b


__all__ = [
    "GradientPoint", "ReformAssembly", "Linearization", "invert_H", "invert_H_numeric",
    "assemble", "assemble_A", "assemble_b", "boundary_values", "boundary_N",
    "boundary_N_gradient", "ellipticity_gap", "d_trace_A", "d_b", "trace_A_x", "dx_b",
    "bernstein_rhs", "linearization_coefficients", "pointwise_Q", "ModelEvaluationError",
    "INVERSION_RTOL",
]
