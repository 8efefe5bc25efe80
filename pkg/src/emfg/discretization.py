"""Periodic space-time grid, finite-difference stencils, residual and Jacobian.

Unknowns live on the nodes ``(t_n, x_j)`` with ``n = 0..Nt`` and ``x_j`` on a
uniform periodic grid of the unit torus.  Nodes are numbered time-major and
lexicographically in space, so a field reshapes to ``(Nt+1, Nx[, Nx])``.

Interior layers carry the quasilinear equation, the layers t = 0 and t = T
carry the boundary operators only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import GridError, InversionError
from .models import Model
from .reformulation import assemble, boundary_values, d_b, d_trace_A, invert_H


@dataclass(frozen=True)
class SpaceTimeGrid:
    d: int
    Nx: int
    Nt: int
    T: float = 1.0

    def __post_init__(self):
        if self.d not in (1, 2):
            raise GridError(f"d must be 1 or 2, got {self.d}")
        if self.Nx < 8 or self.Nt < 8:
            raise GridError(f"need Nx >= 8 and Nt >= 8, got Nx={self.Nx}, Nt={self.Nt}")
        if not self.T > 0:
            raise GridError(f"time horizon must be positive, got {self.T}")

    @property
    def hx(self) -> float:
        return 1.0 / self.Nx

    @property
    def ht(self) -> float:
        return self.T / self.Nt

    @property
    def n_space(self) -> int:
        return self.Nx**self.d

    @property
    def size(self) -> int:
        return self.n_space * (self.Nt + 1)

    @property
    def shape(self) -> tuple:
        return (self.Nt + 1,) + (self.Nx,) * self.d

    @cached_property
    def x_nodes(self) -> np.ndarray:
        """Spatial coordinates of every node, shape ``(size, d)``."""
        axis = np.arange(self.Nx) * self.hx
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        xs = np.stack([a.ravel() for a in mesh], axis=1)
        return np.tile(xs, (self.Nt + 1, 1))

    @cached_property
    def t_nodes(self) -> np.ndarray:
        return np.repeat(np.arange(self.Nt + 1) * self.ht, self.n_space)

    @cached_property
    def layer(self) -> np.ndarray:
        return np.repeat(np.arange(self.Nt + 1), self.n_space)

    @cached_property
    def interior(self) -> np.ndarray:
        return (self.layer > 0) & (self.layer < self.Nt)

    @cached_property
    def initial(self) -> np.ndarray:
        return self.layer == 0

    @cached_property
    def terminal(self) -> np.ndarray:
        return self.layer == self.Nt

    def index(self, n: int, *j: int) -> int:
        """Flat index of node ``(t_n, x_j)``; spatial indices wrap periodically."""
        if len(j) != self.d:
            raise IndexError(f"expected {self.d} spatial indices")
        k = 0
        for jj in j:
            k = k * self.Nx + (jj % self.Nx)
        return n * self.n_space + k

    def node(self, i: int):
        """``(t, x)`` coordinates of flat node ``i``."""
        return float(self.t_nodes[i]), self.x_nodes[i].copy()

    # --- stencil operators ---------------------------------------------------------
    @cached_property
    def _ops(self) -> dict:
        Nx, Nt, hx, ht = self.Nx, self.Nt, self.hx, self.ht
        ix = sp.identity(Nx, format="csr")
        it = sp.identity(Nt + 1, format="csr")
        cx = sp.diags([-1.0, 1.0, -1.0, 1.0], [-1, 1, Nx - 1, -(Nx - 1)], shape=(Nx, Nx)) / (2 * hx)
        sxx = sp.diags([1.0, -2.0, 1.0, 1.0, 1.0], [-1, 0, 1, Nx - 1, -(Nx - 1)], shape=(Nx, Nx)) / hx**2
        ct = sp.lil_matrix((Nt + 1, Nt + 1))
        stt = sp.lil_matrix((Nt + 1, Nt + 1))
        pint = sp.lil_matrix((Nt + 1, Nt + 1))
        for n in range(1, Nt):
            ct[n, n - 1], ct[n, n + 1] = -0.5 / ht, 0.5 / ht
            stt[n, n - 1], stt[n, n], stt[n, n + 1] = 1 / ht**2, -2 / ht**2, 1 / ht**2
            pint[n, n] = 1.0
        ct_int = ct.tocsr(copy=True)
        ct[0, 0], ct[0, 1], ct[0, 2] = -1.5 / ht, 2.0 / ht, -0.5 / ht
        ct[Nt, Nt], ct[Nt, Nt - 1], ct[Nt, Nt - 2] = 1.5 / ht, -2.0 / ht, 0.5 / ht
        ct, stt, pint = ct.tocsr(), stt.tocsr(), pint.tocsr()

        def space(k, op):
            # op acting on spatial axis k, identity on the others
            mats = [op if a == k else ix for a in range(self.d)]
            out = mats[0]
            for mm in mats[1:]:
                out = sp.kron(out, mm, format="csr")
            return out

        ispace = sp.identity(self.n_space, format="csr")
        D = self.d + 1
        grad = [sp.kron(it, space(k, cx), format="csr") for k in range(self.d)]
        grad.append(sp.kron(ct, ispace, format="csr"))
        hess = {}
        for a in range(self.d):
            hess[(a, a)] = sp.kron(pint, space(a, sxx), format="csr")
            for b in range(a + 1, self.d):
                hess[(a, b)] = sp.kron(pint, space(a, cx) @ space(b, cx), format="csr")
            hess[(a, D - 1)] = sp.kron(ct_int, space(a, cx), format="csr")
        hess[(D - 1, D - 1)] = sp.kron(stt, ispace, format="csr")
        return {"grad": grad, "hess": hess}

    def gradient_operators(self) -> list:
        """Sparse operators for ``(u_x1, .., u_xd, u_t)`` at every node."""
        return self._ops["grad"]

    def hessian_operators(self) -> dict:
        """Sparse second-derivative operators keyed by ``(a, b)``, a <= b; zero rows off the interior."""
        return self._ops["hess"]

    def gradient(self, u) -> np.ndarray:
        """Discrete ``Du = (D_x u, u_t)`` at every node, shape ``(size, d+1)``."""
        u = np.asarray(u, dtype=float).ravel()
        return np.stack([op @ u for op in self.gradient_operators()], axis=1)

    def hessian(self, u) -> np.ndarray:
        """Discrete space-time Hessian at every node (zeros on the boundary layers)."""
        u = np.asarray(u, dtype=float).ravel()
        D = self.d + 1
        out = np.zeros((self.size, D, D))
        for (a, b), op in self.hessian_operators().items():
            v = op @ u
            out[:, a, b] = v
            out[:, b, a] = v
        return out

    def trapezoid_mean(self, values) -> np.ndarray:
        """Spatial integral over the torus of a nodal field, one value per time layer."""
        v = np.asarray(values, dtype=float).reshape(self.Nt + 1, self.n_space)
        return v.mean(axis=1)


def gradient_at(grid: SpaceTimeGrid, u, node: int):
    """``(p, s)`` at one node."""
    u = np.asarray(u, dtype=float).ravel()
    vals = np.array([op.getrow(node).dot(u)[0] for op in grid.gradient_operators()])
    return vals[:grid.d], float(vals[grid.d])


def hessian_at(grid: SpaceTimeGrid, u, node: int) -> np.ndarray:
    """Space-time Hessian at an interior node."""
    if not grid.interior[node]:
        raise ValueError(f"node {node} lies on a boundary layer; the Hessian is interior-only")
    u = np.asarray(u, dtype=float).ravel()
    D = grid.d + 1
    out = np.zeros((D, D))
    for (a, b), op in grid.hessian_operators().items():
        out[a, b] = out[b, a] = op.getrow(node).dot(u)[0]
    return out


# --- residual and Jacobian ---------------------------------------------------------

def _locate(grid, rows, err: InversionError):
    """Re-raise an inversion failure with grid coordinates attached."""
    idx = rows[err.index[0]] if err.index is not None and len(err.index) else rows[0]
    t, x = grid.node(int(idx))
    new = type(err)(f"{err} [node {int(idx)}: t={t:.6g}, x={np.array2string(x, precision=6)}]",
                    index=rows[err.index] if err.index is not None else None,
                    x=err.x, p=err.p, s=err.s, node=(int(idx), t, x))
    return new


@dataclass
class Evaluation:
    """Residual at an iterate, plus the pointwise data needed for its Jacobian."""

    F: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    interior: object = None
    initial: tuple = None
    terminal: tuple = None
    m: np.ndarray = field(default=None)


def evaluate(model: Model, grid: SpaceTimeGrid, u, forcing=None, m_guess=None,
             keep: bool = False) -> Evaluation:
    u = np.asarray(u, dtype=float).ravel()
    if u.shape[0] != grid.size:
        raise ValueError(f"field has {u.shape[0]} values, grid has {grid.size} nodes")
    d = grid.d
    G = grid.gradient(u)
    Hs = grid.hessian(u)
    F = np.empty(grid.size)
    m = np.empty(grid.size)
    X = grid.x_nodes
    rows_i = np.flatnonzero(grid.interior)
    rows_0 = np.flatnonzero(grid.initial)
    rows_T = np.flatnonzero(grid.terminal)
    guess = None if m_guess is None else np.asarray(m_guess)
    try:
        asm = assemble(model, X[rows_i], G[rows_i, :d], G[rows_i, d],
                       m_guess=None if guess is None else guess[rows_i])
    except InversionError as err:
        raise _locate(grid, rows_i, err) from err
    F[rows_i] = -np.einsum("nij,nij->n", asm.A, Hs[rows_i]) + asm.b
    m[rows_i] = asm.m
    b0 = boundary_values(model, True, X[rows_0], G[rows_0, :d], G[rows_0, d], u[rows_0])
    F[rows_0] = b0[0]
    m[rows_0] = model.initial_density(X[rows_0])[0]
    try:
        mT = np.atleast_1d(invert_H(model, X[rows_T], G[rows_T, :d], G[rows_T, d],
                                    m_guess=None if guess is None else guess[rows_T]))
        bT = boundary_values(model, False, X[rows_T], G[rows_T, :d], G[rows_T, d], u[rows_T],
                             m_guess=mT)
    except InversionError as err:
        raise _locate(grid, rows_T, err) from err
    F[rows_T] = bT[0]
    m[rows_T] = mT
    if forcing is not None:
        F = F - np.asarray(forcing, dtype=float).ravel()
    ev = Evaluation(F=F, grad=G, hess=Hs, m=m)
    if keep:
        ev.interior, ev.initial, ev.terminal = asm, b0, bT
    return ev


def residual(model: Model, grid: SpaceTimeGrid, u, forcing=None) -> np.ndarray:
    """Discrete residual: Q on interior rows, N on the t = 0 and t = T rows.

    ``forcing`` (same length as ``u``) is subtracted row by row; it is the hook
    for manufactured solutions.
    """
    return evaluate(model, grid, u, forcing=forcing).F


def jacobian_from(grid: SpaceTimeGrid, ev: Evaluation) -> sp.csr_matrix:
    """Sparse Jacobian assembled from the linearisation at an evaluated iterate."""
    d, D, N = grid.d, grid.d + 1, grid.size
    rows_i = np.flatnonzero(grid.interior)
    rows_0 = np.flatnonzero(grid.initial)
    rows_T = np.flatnonzero(grid.terminal)
    asm = ev.interior
    first = -d_trace_A(asm, ev.hess[rows_i]) + d_b(asm)

    def diag(rows, vals):
        v = np.zeros(N)
        v[rows] = vals
        return sp.diags(v, format="csr")

    grad_ops = grid.gradient_operators()
    J = sp.csr_matrix((N, N))
    for (a, b), op in grid.hessian_operators().items():
        w = asm.A[:, a, b] if a == b else 2.0 * asm.A[:, a, b]
        J = J + diag(rows_i, -w) @ op
    for k in range(D):
        J = J + diag(rows_i, first[:, k]) @ grad_ops[k]
    # t = 0: dN/dp . D_x + dN/ds D_t
    _, _, dp0, ds0 = ev.initial
    _, dzT, dpT, dsT = ev.terminal
    for k in range(d):
        J = J + diag(rows_0, dp0[:, k]) @ grad_ops[k] + diag(rows_T, dpT[:, k]) @ grad_ops[k]
    J = J + diag(rows_0, ds0) @ grad_ops[d] + diag(rows_T, dsT) @ grad_ops[d] + diag(rows_T, dzT)
    return J.tocsr()


def jacobian(model: Model, grid: SpaceTimeGrid, u, m_guess=None) -> sp.csr_matrix:
    """Analytic Jacobian of :func:`residual` (rows aligned with the residual)."""
    return jacobian_from(grid, evaluate(model, grid, u, m_guess=m_guess, keep=True))


def jacobian_fd(model: Model, grid: SpaceTimeGrid, u, eps: float = 1e-7) -> np.ndarray:
    """Dense centred-difference Jacobian; for testing on small grids only."""
    u = np.asarray(u, dtype=float).ravel()
    J = np.empty((grid.size, grid.size))
    for k in range(grid.size):
        e = np.zeros(grid.size)
        e[k] = eps
        J[:, k] = (residual(model, grid, u + e) - residual(model, grid, u - e)) / (2 * eps)
    return J


# --- field files ----------------------------------------------------------------------

def write_field(path, grid: SpaceTimeGrid, values, name: str = "value"):
    """Columnar text: one row per node, columns ``t x1 .. xd value``, 17 significant digits."""
    values = np.asarray(values, dtype=float).ravel()
    if values.shape[0] != grid.size:
        raise ValueError("field length does not match the grid")
    cols = np.column_stack([grid.t_nodes, grid.x_nodes, values])
    header = (f"grid d={grid.d} Nx={grid.Nx} Nt={grid.Nt} T={grid.T!r}\n"
              + " ".join(["t"] + [f"x{k + 1}" for k in range(grid.d)] + [name]))
    np.savetxt(path, cols, fmt="%.17g", header=header)


def read_field(path, grid: SpaceTimeGrid | None = None):
    """Read a field file; when ``grid`` is given, node coordinates must match it.

    Returns ``(grid, values)``.
    """
    with open(path) as fh:
        first = fh.readline()
    meta = dict(item.split("=") for item in first.lstrip("# ").split()[1:])
    file_grid = SpaceTimeGrid(d=int(meta["d"]), Nx=int(meta["Nx"]), Nt=int(meta["Nt"]),
                              T=float(meta["T"]))
    data = np.loadtxt(path, ndmin=2)
    if data.shape != (file_grid.size, file_grid.d + 2):
        raise GridError(f"{path}: {data.shape} table does not match its own grid header")
    if not (np.array_equal(data[:, 0], file_grid.t_nodes)
            and np.array_equal(data[:, 1:-1], file_grid.x_nodes)):
        raise GridError(f"{path}: node coordinates do not match the grid header")
    if grid is not None and grid != file_grid:
        raise GridError(f"{path}: field grid {file_grid} differs from expected {grid}")
    return file_grid, data[:, -1].copy()
