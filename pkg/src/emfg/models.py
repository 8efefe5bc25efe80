"""Model data: Hamiltonian, flux, terminal cost and initial density with derivative stacks.

All evaluators are vectorised over a batch of points: ``x`` and ``p`` have shape
``(n, d)`` and ``m`` has shape ``(n,)``.  Derivative arrays follow one index
convention throughout the package (``i``, ``j``, ``k`` are spatial indices):

==========  ==========================  ===========================
field       shape                        meaning
==========  ==========================  ===========================
H_p         (n, d)                       dH/dp_j
H_pp        (n, d, d)                    d2H/dp_i dp_j
H_xp        (n, d, d)                    d2H/dx_i dp_j
H_xx        (n, d, d)                    d2H/dx_i dx_j
B_p         (n, d, d)                    dB_i/dp_j
B_x         (n, d, d)                    dB_i/dx_j
B_xm        (n, d, d)                    d2B_i/dx_j dm
B_pp        (n, d, d, d)                 d2B_i/dp_j dp_k
B_xp        (n, d, d, d)                 d2B_i/dp_j dx_k
B_xx        (n, d, d, d)                 d2B_i/dx_j dx_k
==========  ==========================  ===========================
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import ModelError, ModelEvaluationError

MIN_DENSITY = 1e-12

H_FIELDS = ("H", "H_p", "H_m", "H_pp", "H_xp", "H_x", "H_mm", "H_pm", "H_xm", "H_xx")
B_FIELDS = ("B", "B_m", "B_p", "B_pm", "B_mm", "B_x", "divB", "B_xm", "B_pp", "B_xp", "B_xx")


@dataclass(frozen=True)
class ModelConstants:
    """Structural constants of the growth assumptions.

    ``psi`` must be non-increasing and positive; ``Cbar`` continuous and positive.
    Both are plain vectorised callables of ``m``.
    """

    C0: float
    gamma: float
    gamma1: float
    gamma2: float
    psi: Callable[[np.ndarray], np.ndarray]
    Cbar: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if not self.C0 > 0:
            raise ModelError(f"C0 must be positive, got {self.C0}")
        if not self.gamma > 1:
            raise ModelError(f"gamma must exceed 1, got {self.gamma}")
        if not self.gamma1 >= 0:
            raise ModelError(f"gamma1 must be non-negative, got {self.gamma1}")
        if not self.gamma2 <= self.gamma1 <= self.gamma:
            raise ModelError(
                f"need gamma2 <= gamma1 <= gamma, got {self.gamma2}, {self.gamma1}, {self.gamma}"
            )
        if not self.exponent_margin > 0:
            raise ModelError(
                f"need gamma2 < 2*gamma1 - gamma + 2 = {2 * self.gamma1 - self.gamma + 2}, "
                f"got gamma2 = {self.gamma2}"
            )
        if self.gamma1 < self.gamma and not psi_has_positive_limit(self.psi):
            raise ModelError("gamma1 < gamma requires lim psi(m) > 0 as m -> infinity")

    @property
    def exponent_margin(self) -> float:
        """2*gamma1 - gamma + 2 - gamma2; strictly positive for admissible exponents."""
        return 2 * self.gamma1 - self.gamma + 2 - self.gamma2


def psi_has_positive_limit(psi) -> bool:
    # Sampled test: psi stays positive and has flattened out between 1e6 and 1e12.
    mid, far = (float(v) for v in np.asarray(psi(np.array([1e6, 1e12]))))
    return far > 0 and far >= 0.5 * mid


@dataclass
class Stack:
    """One evaluation of every H and B derivative used by the reformulation."""

    H: np.ndarray
    H_p: np.ndarray
    H_m: np.ndarray
    H_pp: np.ndarray
    H_xp: np.ndarray
    H_x: np.ndarray
    H_mm: np.ndarray
    H_pm: np.ndarray
    H_xm: np.ndarray
    H_xx: np.ndarray
    B: np.ndarray
    B_m: np.ndarray
    B_p: np.ndarray
    B_pm: np.ndarray
    B_mm: np.ndarray
    B_x: np.ndarray
    divB: np.ndarray
    B_xm: np.ndarray
    B_pp: np.ndarray
    B_xp: np.ndarray
    B_xx: np.ndarray

    def squeeze(self) -> "Stack":
        return Stack(**{f.name: getattr(self, f.name)[0] for f in fields(self)})


def as_batch(x, p=None, m=None, d=None):
    """Broadcast point data to batch shapes ``(n, d)``, ``(n, d)``, ``(n,)``.

    Returns the arrays and a flag telling whether the input was a single point.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (x.ndim == 1 and (d is None or x.size == d))
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, -1) if d is None or x.size == d else x.reshape(-1, 1)
    n, dim = x.shape
    out = [x]
    if p is not None:
        p = np.asarray(p, dtype=float)
        p = np.broadcast_to(p.reshape(-1, dim) if p.ndim <= 1 else p, (n, dim))
        out.append(p)
    if m is not None:
        m = np.broadcast_to(np.asarray(m, dtype=float).reshape(-1), (n,))
        out.append(m)
    return out, single


class Model:
    """Base class for a (H, B, g, m0) bundle.

    Subclasses implement :meth:`_stack`, :meth:`hamiltonian`, :meth:`flux`,
    :meth:`terminal` and :meth:`initial_density` on batches.  A closed-form
    inverse of ``m -> H(x, p, m)`` may be registered as ``closed_form_inverse``.
    ``log_coupled`` marks models with ``H = F(x, p) - log m``; convex blends of
    such models keep a closed-form inverse.
    """

    name = "model"
    closed_form_inverse: Callable | None = None
    log_coupled: bool = False

    def __init__(self, d: int, constants: ModelConstants):
        if d not in (1, 2):
            raise ModelError(f"spatial dimension must be 1 or 2, got {d}")
        self.d = d
        self.constants = constants

    # --- evaluators (batched) -------------------------------------------------
    def _stack(self, x, p, m) -> dict:
        raise NotImplementedError

    def hamiltonian(self, x, p, m) -> np.ndarray:
        return self._stack(x, p, m)["H"]

    def hamiltonian_m(self, x, p, m) -> np.ndarray:
        return self._stack(x, p, m)["H_m"]

    def flux(self, x, p, m) -> np.ndarray:
        """B(x, p, m); defined down to m = 0."""
        return self._stack(x, p, m)["B"]

    def terminal(self, x, m):
        """Return ``(g, g_m, g_x)`` with ``g_x`` of shape ``(n, d)``."""
        raise NotImplementedError

    def initial_density(self, x):
        """Return ``(m0, m0_x)``."""
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    # --- structural checks ----------------------------------------------------
    def validate(self, n_samples: int = 64, n_quad: int = 256):
        """Sampled check of monotonicity in m and of the initial density.

        Raises :class:`ModelError` on the first violated invariant.
        """
        d = self.d
        sample = qmc.Halton(d=2 * d + 1, scramble=False).random(n_samples + 1)[1:]
        x = sample[:, :d]
        p = 20.0 * sample[:, d:2 * d] - 10.0
        m = 10.0 ** (6.0 * sample[:, -1] - 3.0)
        with np.errstate(all="ignore"):
            hm = self.hamiltonian_m(x, p, m)
            gm = self.terminal(x, m)[1]
        if not np.all(hm < 0):
            i = int(np.argmax(~(hm < 0)))
            raise ModelError(f"H_m must be negative; H_m = {hm[i]} at x={x[i]}, p={p[i]}, m={m[i]}")
        if not np.all(gm > 0):
            i = int(np.argmax(~(gm > 0)))
            raise ModelError(f"g_m must be positive; g_m = {gm[i]} at x={x[i]}, m={m[i]}")
        m0, mass = initial_mass(self, n_quad)
        if not np.all(m0 > 0):
            raise ModelError(f"initial density must be positive, min = {m0.min()}")
        if abs(mass - 1.0) > 1e-10:
            raise ModelError(f"initial density must have unit mass, got {mass}")
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


def torus_nodes(d: int, n: int) -> np.ndarray:
    """Uniform periodic grid of ``n**d`` points on the unit torus, shape ``(n**d, d)``."""
    axis = np.arange(n) / n
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=1)


def initial_mass(model: Model, n: int = 256):
    x = torus_nodes(model.d, n)
    m0 = model.initial_density(x)[0]
    return m0, float(np.mean(m0))


def eval_stack(model: Model, x, p, m) -> Stack:
    """Evaluate the full H/B derivative stack at one point or a batch of points."""
    (x, p, m), single = as_batch(x, p, m, d=model.d)
    if np.any(~(m >= MIN_DENSITY)):
        i = int(np.argmax(~(m >= MIN_DENSITY)))
        raise ModelEvaluationError(
            f"density {m[i]} below floor {MIN_DENSITY} at x={x[i]}, p={p[i]}",
            evaluator="stack",
            point=(x[i], p[i], m[i]),
        )
    with np.errstate(all="ignore"):
        values = model._stack(x, p, m)
    for name in H_FIELDS + B_FIELDS:
        arr = np.asarray(values[name])
        if not np.all(np.isfinite(arr)):
            bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
            i = int(np.argmax(bad))
            raise ModelEvaluationError(
                f"non-finite {name} at x={x[i]}, p={p[i]}, m={m[i]}",
                evaluator=name,
                point=(x[i], p[i], m[i]),
            )
    stack = Stack(**{k: np.asarray(values[k], dtype=float) for k in H_FIELDS + B_FIELDS})
    return stack.squeeze() if single else stack


# --- built-in models -----------------------------------------------------------

def _scalar_log():
    return (np.log, lambda m: 1.0 / m, lambda m: -1.0 / m**2)


def _scalar_power(beta):
    return (
        lambda m: m**beta,
        lambda m: beta * m ** (beta - 1),
        lambda m: beta * (beta - 1) * m ** (beta - 2),
    )


COUPLINGS = {"log": lambda **kw: _scalar_log(), "power": lambda beta=1.0, **kw: _scalar_power(beta)}
TERMINAL_COSTS = ("log", "linear")


@dataclass(repr=False, eq=False)
class SeparableModel(Model):
    """H = phi(m) K(p) + sigma V(x) - f(m),  B = m phi(m) D_pK(p).

    This family covers the three built-ins: the separated quadratic-log model
    (phi = 1, K = |p|^2/2), congestion (phi = (m + c0)^-alpha) and the
    separated power Hamiltonian (K = (1 + |p|^2)^(gamma/2) / gamma).
    """

    d: int = 1
    kinetic: str = "quadratic"
    kinetic_gamma: float = 2.0
    alpha: float = 0.0
    c0: float = 1.0
    sigma: float = 1.0
    kappa_V: float = 0.1
    amplitude: float = 0.2
    f: str = "log"
    f_beta: float = 1.0
    g: str = "log"
    constants: ModelConstants = None
    name: str = "separable"
    _f: tuple = field(init=False, repr=False)

    def __post_init__(self):
        Model.__init__(self, self.d, self.constants)
        if self.kinetic not in ("quadratic", "power"):
            raise ModelError(f"unknown kinetic term {self.kinetic!r}")
        if self.f not in COUPLINGS:
            raise ModelError(f"unknown coupling f={self.f!r}; choose from {sorted(COUPLINGS)}")
        if self.g not in TERMINAL_COSTS:
            raise ModelError(f"unknown terminal cost g={self.g!r}; choose from {TERMINAL_COSTS}")
        if self.alpha < 0 or self.c0 < 0:
            raise ModelError("alpha and c0 must be non-negative")
        if not -1.0 < self.amplitude < 1.0:
            raise ModelError(f"|amplitude| must be < 1 for a positive m0, got {self.amplitude}")
        if self.f == "power" and self.f_beta <= 0:
            raise ModelError("power coupling needs f_beta > 0")
        self._f = COUPLINGS[self.f](beta=self.f_beta)
        if self.alpha == 0.0 and self.f == "log":
            self.closed_form_inverse = self._log_inverse
            self.log_coupled = True

    def params(self):
        keys = ("d", "kinetic", "kinetic_gamma", "alpha", "c0", "sigma", "kappa_V", "amplitude",
                "f", "f_beta", "g")
        return {k: getattr(self, k) for k in keys}

    # kinetic part K(p) and its p-derivatives
    def _kinetic(self, p, order=3):
        n, d = p.shape
        eye = np.eye(d)
        if self.kinetic == "quadratic":
            K = 0.5 * np.sum(p * p, axis=1)
            Kp = p.copy()
            Kpp = np.broadcast_to(eye, (n, d, d)).copy()
            Kppp = np.zeros((n, d, d, d))
            return K, Kp, Kpp, Kppp
        g = self.kinetic_gamma
        w = 1.0 + np.sum(p * p, axis=1)
        K = w ** (g / 2) / g
        a1 = w ** (g / 2 - 1)
        a2 = (g - 2) * w ** (g / 2 - 2)
        Kp = a1[:, None] * p
        Kpp = a1[:, None, None] * eye + a2[:, None, None] * np.einsum("ni,nj->nij", p, p)
        if order < 3:
            return K, Kp, Kpp, None
        a3 = (g - 2) * (g - 4) * w ** (g / 2 - 3)
        sym = (np.einsum("ij,nk->nijk", eye, p) + np.einsum("ik,nj->nijk", eye, p)
               + np.einsum("jk,ni->nijk", eye, p))
        Kppp = a2[:, None, None, None] * sym + a3[:, None, None, None] * np.einsum(
            "ni,nj,nk->nijk", p, p, p)
        return K, Kp, Kpp, Kppp

    def _phi(self, m):
        if self.alpha == 0.0:
            one = np.ones_like(m)
            return one, 0.0 * m, 0.0 * m
        a, c = self.alpha, self.c0
        base = m + c
        return base ** (-a), -a * base ** (-a - 1), a * (a + 1) * base ** (-a - 2)

    def _potential(self, x):
        n, d = x.shape
        k = 2 * np.pi
        V = self.kappa_V * np.cos(k * x[:, 0])
        Vx = np.zeros((n, d))
        Vx[:, 0] = -k * self.kappa_V * np.sin(k * x[:, 0])
        Vxx = np.zeros((n, d, d))
        Vxx[:, 0, 0] = -k * k * self.kappa_V * np.cos(k * x[:, 0])
        return V, Vx, Vxx

    def hamiltonian(self, x, p, m):
        K = self._kinetic(p, order=1)[0] if self.kinetic == "power" else 0.5 * np.sum(p * p, axis=1)
        phi = self._phi(m)[0]
        V = self.kappa_V * np.cos(2 * np.pi * x[:, 0])
        return phi * K + self.sigma * V - self._f[0](m)

    def hamiltonian_m(self, x, p, m):
        K = self._kinetic(p, order=1)[0] if self.kinetic == "power" else 0.5 * np.sum(p * p, axis=1)
        return self._phi(m)[1] * K - self._f[1](m)

    def flux(self, x, p, m):
        Kp = self._kinetic(p, order=1)[1]
        if self.alpha == 0.0:
            beta = m
        else:
            beta = m * (m + self.c0) ** (-self.alpha)
        return beta[:, None] * Kp

    def _stack(self, x, p, m):
        n, d = x.shape
        K, Kp, Kpp, Kppp = self._kinetic(p)
        phi, dphi, d2phi = self._phi(m)
        f0, f1, f2 = (fn(m) for fn in self._f)
        V, Vx, Vxx = self._potential(x)
        beta, dbeta, d2beta = m * phi, phi + m * dphi, 2 * dphi + m * d2phi
        s = self.sigma
        zd = np.zeros((n, d))
        zdd = np.zeros((n, d, d))
        zddd = np.zeros((n, d, d, d))
        return {
            "H": phi * K + s * V - f0,
            "H_p": phi[:, None] * Kp,
            "H_m": dphi * K - f1,
            "H_pp": phi[:, None, None] * Kpp,
            "H_xp": zdd,
            "H_x": s * Vx,
            "H_mm": d2phi * K - f2,
            "H_pm": dphi[:, None] * Kp,
            "H_xm": zd,
            "H_xx": s * Vxx,
            "B": beta[:, None] * Kp,
            "B_m": dbeta[:, None] * Kp,
            "B_p": beta[:, None, None] * Kpp,
            "B_pm": dbeta[:, None, None] * Kpp,
            "B_mm": d2beta[:, None] * Kp,
            "B_x": zdd,
            "divB": np.zeros(n),
            "B_xm": zdd,
            "B_pp": beta[:, None, None, None] * Kppp,
            "B_xp": zddd,
            "B_xx": zddd,
        }

    def _log_inverse(self, x, p, s):
        K = self._kinetic(p, order=1)[0] if self.kinetic == "power" else 0.5 * np.sum(p * p, axis=1)
        V = self.kappa_V * np.cos(2 * np.pi * x[:, 0])
        return np.exp(K + self.sigma * V - s)

    def terminal(self, x, m):
        n, d = x.shape
        if self.g == "log":
            return np.log(m), 1.0 / m, np.zeros((n, d))
        return np.array(m, dtype=float), np.ones(n), np.zeros((n, d))

    def initial_density(self, x):
        n, d = x.shape
        k = 2 * np.pi
        m0 = 1.0 + self.amplitude * np.cos(k * x[:, 0])
        m0x = np.zeros((n, d))
        m0x[:, 0] = -k * self.amplitude * np.sin(k * x[:, 0])
        return m0, m0x

    @property
    def V_sup(self) -> float:
        return abs(self.kappa_V)


def _default_cbar(model_f, V_sup):
    f0, f1, _ = model_f

    def Cbar(m):
        m = np.asarray(m, dtype=float)
        return 2.0 + 2.0 * V_sup + 2.0 * np.abs(f0(m)) + m * np.abs(f1(m))

    return Cbar


def _const_psi(m):
    return np.ones_like(np.asarray(m, dtype=float))


def sql_model(d=1, kappa_V=0.1, amplitude=0.2, g="log", C0=2.0, gamma2=-0.5, validate=True):
    """Separated quadratic-log model: H = |p|^2/2 + V(x) - log m, B = m p."""
    f = _scalar_log()
    constants = ModelConstants(C0=C0, gamma=2.0, gamma1=0.0, gamma2=gamma2, psi=_const_psi,
                               Cbar=_default_cbar(f, abs(kappa_V)))
    model = SeparableModel(d=d, kinetic="quadratic", sigma=1.0, kappa_V=kappa_V,
                           amplitude=amplitude, f="log", g=g, constants=constants, name="sql")
    return model.validate() if validate else model


def congestion_model(d=1, alpha=1.0, c0=1.0, kappa_V=0.1, amplitude=0.2, f="log", f_beta=1.0,
                     g="log", C0=10.0, gamma2=0.0, validate=True):
    """Congestion: H = |p|^2 / (2 (m + c0)^alpha) - V(x) - f(m), B = m p / (m + c0)^alpha.

    Uniqueness holds for 0 < alpha < 2; larger alpha is accepted so that the
    loss of ellipticity can be observed numerically.
    """
    if not alpha > 0:
        raise ModelError(f"congestion exponent alpha must be positive, got {alpha}")
    fn = COUPLINGS.get(f, lambda **kw: None)(beta=f_beta)

    def psi(m, a=alpha, c=c0):
        return (np.asarray(m, dtype=float) + c) ** (-a)

    constants = ModelConstants(C0=C0, gamma=2.0, gamma1=2.0, gamma2=gamma2, psi=psi,
                               Cbar=_default_cbar(fn or _scalar_log(), abs(kappa_V)))
    model = SeparableModel(d=d, kinetic="quadratic", alpha=alpha, c0=c0, sigma=-1.0,
                           kappa_V=kappa_V, amplitude=amplitude, f=f, f_beta=f_beta, g=g,
                           constants=constants, name="congestion")
    return model.validate() if validate else model


def power_model(d=1, gamma=1.5, kappa_V=0.1, amplitude=0.2, f="log", f_beta=1.0, g="log",
                C0=None, gamma2=None, validate=True):
    """Separated power Hamiltonian: H = (1 + |p|^2)^(gamma/2) / gamma + V(x) - f(m), B = m D_pH."""
    if C0 is None:
        C0 = max(4.0, 2.0 / (gamma - 1.0))
    if gamma2 is None:
        gamma2 = min(0.0, 2.0 - gamma) - 0.5
    fn = COUPLINGS.get(f, lambda **kw: None)(beta=f_beta)
    constants = ModelConstants(C0=C0, gamma=gamma, gamma1=0.0, gamma2=gamma2, psi=_const_psi,
                               Cbar=_default_cbar(fn or _scalar_log(), abs(kappa_V)))
    model = SeparableModel(d=d, kinetic="power", kinetic_gamma=gamma, sigma=1.0, kappa_V=kappa_V,
                           amplitude=amplitude, f=f, f_beta=f_beta, g=g, constants=constants,
                           name="power")
    return model.validate() if validate else model


BUILTIN_MODELS = {"sql": sql_model, "congestion": congestion_model, "power": power_model}


# --- finite-difference self check -------------------------------------------

# (child, parent, variable, reduction); FD derivative index is appended last.
_FD_CHECKS = (
    ("H_p", "H", "p", None), ("H_m", "H", "m", None), ("H_x", "H", "x", None),
    ("H_pp", "H_p", "p", None), ("H_xp", "H_x", "p", None), ("H_pm", "H_p", "m", None),
    ("H_mm", "H_m", "m", None), ("H_xm", "H_x", "m", None), ("H_xx", "H_x", "x", None),
    ("B_m", "B", "m", None), ("B_p", "B", "p", None), ("B_x", "B", "x", None),
    ("divB", "B", "x", "trace"), ("B_pm", "B_p", "m", None), ("B_mm", "B_m", "m", None),
    ("B_xm", "B_x", "m", None), ("B_pp", "B_p", "p", None), ("B_xp", "B_p", "x", None),
    ("B_xx", "B_x", "x", None),
)


def _rel_err(analytic, approx):
    analytic = np.asarray(analytic)
    return float(np.max(np.abs(analytic - approx) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def fd_self_check(model: Model, points, h: float = 1e-5) -> dict:
    """Compare each analytic derivative with a centred difference of its parent.

    ``points`` is a tuple ``(x, p, m)`` of batches.  Returns the maximum
    relative discrepancy (with a unit floor on the denominator) per evaluator.
    """
    x, p, m = points
    (x, p, m), _ = as_batch(x, p, m, d=model.d)
    n, d = x.shape
    base = eval_stack(model, x, p, m)
    report = {}

    def shifted(var, k, sign):
        xs, ps, ms = x.copy(), p.copy(), m.copy()
        if var == "x":
            xs[:, k] += sign * h
        elif var == "p":
            ps[:, k] += sign * h
        else:
            ms = ms + sign * h
        return xs, ps, ms

    cache = {}

    def stack_at(var, k, sign):
        key = (var, k, sign)
        if key not in cache:
            cache[key] = eval_stack(model, *shifted(var, k, sign))
        return cache[key]

    for child, parent, var, reduction in _FD_CHECKS:
        if var == "m":
            fd = (getattr(stack_at("m", 0, 1), parent) - getattr(stack_at("m", 0, -1), parent)) / (2 * h)
        else:
            fd = np.stack(
                [(getattr(stack_at(var, k, 1), parent) - getattr(stack_at(var, k, -1), parent)) / (2 * h)
                 for k in range(d)],
                axis=-1,
            )
        if reduction == "trace":
            fd = np.trace(fd, axis1=-2, axis2=-1)
        report[child] = _rel_err(getattr(base, child), fd)

    # terminal cost and initial density
    g, g_m, g_x = model.terminal(x, m)
    fd_gm = (model.terminal(x, m + h)[0] - model.terminal(x, m - h)[0]) / (2 * h)
    report["g_m"] = _rel_err(g_m, fd_gm)
    fd_gx = np.stack([(model.terminal(shifted("x", k, 1)[0], m)[0]
                       - model.terminal(shifted("x", k, -1)[0], m)[0]) / (2 * h) for k in range(d)], axis=-1)
    report["g_x"] = _rel_err(g_x, fd_gx)
    m0, m0_x = model.initial_density(x)
    fd_m0x = np.stack([(model.initial_density(shifted("x", k, 1)[0])[0]
                        - model.initial_density(shifted("x", k, -1)[0])[0]) / (2 * h) for k in range(d)], axis=-1)
    report["m0_x"] = _rel_err(m0_x, fd_m0x)
    # cheap evaluators must agree with the stack
    report["hamiltonian"] = _rel_err(base.H, model.hamiltonian(x, p, m))
    report["hamiltonian_m"] = _rel_err(base.H_m, model.hamiltonian_m(x, p, m))
    report["flux"] = _rel_err(base.B, model.flux(x, p, m))
    return report


def quasi_random_points(d: int, n: int, p_max: float = 5.0, m_range=(0.1, 10.0), skip: int = 1):
    """Deterministic Halton samples of (x, p, m); m is log-uniform in ``m_range``."""
    u = qmc.Halton(d=2 * d + 1, scramble=False).random(n + skip)[skip:]
    x = u[:, :d]
    p = p_max * (2.0 * u[:, d:2 * d] - 1.0)
    lo, hi = np.log(m_range[0]), np.log(m_range[1])
    m = np.exp(lo + (hi - lo) * u[:, -1])
    return x, p, m
