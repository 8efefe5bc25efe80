import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from emfg.errors import CoercivityError, InversionError
from emfg.models import BUILTIN_MODELS, congestion_model, eval_stack, power_model, quasi_random_points, sql_model
from emfg.reformulation import (GradientPoint, assemble, assemble_A, assemble_b, bernstein_rhs,
                                boundary_N, boundary_N_gradient, ellipticity_gap, invert_H,
                                invert_H_numeric, linearization_coefficients, pointwise_Q)

from symbolic import SympyModel, coupled_model, symbols

E = np.e


def brentq_inverse(model, x, p, s):
    """Independent oracle: scalar root of m -> H(x, p, m) - s on a log scale."""
    xs, ps = np.atleast_2d(x), np.atleast_2d(p)
    f = lambda lm: float(model.hamiltonian(xs, ps, np.array([np.exp(lm)]))[0] - s)  # noqa: E731
    return np.exp(brentq(f, -40.0, 40.0, xtol=1e-15, rtol=1e-15))


# --- inversion ----------------------------------------------------------------------

def test_invert_sql_examples():
    model = sql_model(kappa_V=0.1)
    x = 0.3
    V = 0.1 * np.cos(2 * np.pi * x)
    assert invert_H(model, [x], [0.0], V) == pytest.approx(1.0, rel=1e-14)
    flat = sql_model(kappa_V=0.0)
    for closed in (True, False):
        assert invert_H(flat, [0.2], [1.0], 0.0, closed_form=closed) == pytest.approx(np.exp(0.5), rel=1e-12)
        assert invert_H(flat, [0.2], [0.0], 1.0, closed_form=closed) == pytest.approx(np.exp(-1), rel=1e-12)
    assert brentq_inverse(flat, [0.2], [1.0], 0.0) == pytest.approx(1.648721, rel=1e-6)


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
def test_numeric_inverse_matches_brentq_oracle(name):
    model = BUILTIN_MODELS[name](d=1)
    x, p, m = quasi_random_points(1, 40)
    s = model.hamiltonian(x, p, m)
    got = invert_H(model, x, p, s, closed_form=False)
    want = np.array([brentq_inverse(model, x[i], p[i], s[i]) for i in range(40)])
    np.testing.assert_allclose(got, want, rtol=1e-10)


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
@pytest.mark.parametrize("d", [1, 2])
def test_inversion_round_trip(name, d):
    model = BUILTIN_MODELS[name](d=d)
    x, p, m = quasi_random_points(d, 300, m_range=(1e-3, 1e3))
    got = invert_H(model, x, p, model.hamiltonian(x, p, m))
    np.testing.assert_allclose(got, m, rtol=1e-10)
    # residual contract
    s = model.hamiltonian(x, p, m)
    assert np.all(np.abs(model.hamiltonian(x, p, got) - s) <= 1e-11 * (1 + np.abs(s)))


def test_closed_form_and_numeric_paths_agree():
    model = sql_model(d=2)
    x, p, m = quasi_random_points(2, 100)
    s = model.hamiltonian(x, p, m)
    np.testing.assert_allclose(invert_H(model, x, p, s), invert_H_numeric(model, x, p, s), rtol=1e-12)


_cong = congestion_model(alpha=1.0, c0=0.5)


@settings(max_examples=80, deadline=None)
@given(x=st.floats(0, 1), p=st.floats(-8, 8), s1=st.floats(-10, 10), ds=st.floats(1e-3, 5))
def test_inversion_is_monotone_decreasing_in_s(x, p, s1, ds):
    m = invert_H(_cong, [[x], [x]], [[p], [p]], np.array([s1, s1 + ds]))
    assert m[0] > m[1]


def _bounded_model():
    xs, ps, m = symbols(1)
    H = ps[0] ** 2 / 2 + sp.exp(-m)  # bounded in m: no root for s <= inf H
    return SympyModel(1, H, [m * ps[0]], sp.log(m), sp.Integer(1), xs, ps, m)


def test_coercivity_error_when_H_is_bounded_in_m():
    with pytest.raises(CoercivityError) as exc:
        invert_H(_bounded_model(), [0.1], [0.0], -0.5)
    assert exc.value.index is not None


def test_root_below_floor_raises_inversion_error():
    with pytest.raises(InversionError):
        invert_H(sql_model(kappa_V=0.0), [0.1], [0.0], 40.0, closed_form=False)
    with pytest.raises(InversionError):
        invert_H(sql_model(kappa_V=0.0), [0.1], [0.0], 40.0)


# --- A and b -------------------------------------------------------------------------

def test_A_examples_sql():
    model = sql_model(kappa_V=0.0)
    np.testing.assert_allclose(assemble_A(model, GradientPoint(x=[0.3], p=[0.0], s=0.7)), np.eye(2), atol=1e-14)
    np.testing.assert_allclose(assemble_A(model, GradientPoint(x=[0.3], p=[1.0], s=-0.2)),
                               [[2.0, -1.0], [-1.0, 1.0]], atol=1e-14)


@pytest.mark.parametrize("model", [coupled_model(1), coupled_model(2), congestion_model(d=2)],
                         ids=["coupled1", "coupled2", "congestion2"])
def test_A_structure_and_symmetrisation(model):
    d = model.d
    x, p, m = quasi_random_points(d, 20)
    asm = assemble(model, x, p, model.hamiltonian(x, p, m))
    np.testing.assert_allclose(asm.A, np.swapaxes(asm.A, 1, 2))
    assert np.all(asm.A[:, d, d] == 1.0)
    np.testing.assert_allclose(asm.A[:, :d, d], -0.5 * asm.Yplus, atol=1e-14)
    rng = np.random.default_rng(0)
    for _ in range(20):
        S = rng.normal(size=(d + 1, d + 1))
        S = S + S.T
        np.testing.assert_allclose(np.einsum("nij,ij->n", asm.A, S), np.einsum("nij,ij->n", asm.A_raw, S),
                                   rtol=1e-12, atol=1e-12)


def test_b_examples():
    assert assemble_b(sql_model(kappa_V=0.0), GradientPoint(x=[0.4], p=[1.0], s=0.2)) == 0.0
    b = assemble_b(sql_model(kappa_V=0.1), GradientPoint(x=[0.25], p=[1.0], s=0.0))
    assert b == pytest.approx(0.2 * np.pi, rel=1e-12)


def test_b_growth_at_zero_momentum():
    model = coupled_model(1)
    x = np.linspace(0, 1, 11)[:, None]
    asm = assemble(model, x, np.zeros((11, 1)), np.zeros(11))
    st_ = asm.stack
    C0, d = model.constants.C0, 1
    bound = C0 * (np.abs(st_.H_x[:, 0]) + np.abs(st_.H_m) * d * C0 * asm.m)
    assert np.all(np.abs(asm.b) <= bound)


# --- boundary operator ------------------------------------------------------------------

def test_boundary_examples():
    model = sql_model(kappa_V=0.0, amplitude=0.0)
    assert boundary_N(model, 0, GradientPoint(x=[0.3], p=[0.0], s=0.0, z=5.0)) == 0.0
    assert boundary_N(model, 1.0, GradientPoint(x=[0.3], p=[0.0], s=1.0, z=1.0)) == pytest.approx(2.0, rel=1e-13)
    dz, dp, ds = boundary_N_gradient(model, 0, GradientPoint(x=[0.3], p=[0.5], s=0.2))
    assert (dz, ds) == (0.0, -1.0) and dp == pytest.approx([0.5])
    dz, dp, ds = boundary_N_gradient(model, 1.0, GradientPoint(x=[0.3], p=[0.5], s=0.2))
    assert dz == 1.0 and ds == pytest.approx(1.0, rel=1e-13)


@pytest.mark.parametrize("model", [coupled_model(2), congestion_model(d=2)], ids=["coupled2", "congestion2"])
def test_boundary_gradient_matches_fd(model):
    x, p, m = quasi_random_points(2, 5)
    h = 1e-6
    for i in range(5):
        s = float(model.hamiltonian(x[i:i + 1], p[i:i + 1], m[i:i + 1])[0])
        for face in (0, 1.0):
            gp = GradientPoint(x=x[i], p=p[i], s=s, z=0.3)
            dz, dp, ds = boundary_N_gradient(model, face, gp)
            N = lambda **kw: boundary_N(model, face, GradientPoint(**{**gp.__dict__, **kw}))  # noqa: E731
            assert ds == pytest.approx((N(s=s + h) - N(s=s - h)) / (2 * h), rel=1e-6, abs=1e-8)
            assert dz == pytest.approx((N(z=0.3 + h) - N(z=0.3 - h)) / (2 * h), rel=1e-6)
            for k in range(2):
                e = np.eye(2)[k] * h
                assert dp[k] == pytest.approx((N(p=p[i] + e) - N(p=p[i] - e)) / (2 * h), rel=1e-6, abs=1e-8)
            assert (ds < 0) if face == 0 else (ds > 0)


# --- ellipticity -----------------------------------------------------------------------

def test_gap_sql_is_four():
    x, p, m = quasi_random_points(2, 50)
    np.testing.assert_allclose(ellipticity_gap(sql_model(d=2), x, p, m), 4.0, rtol=1e-13)


def test_gap_power_model_matches_eigenvalue_oracle():
    model = power_model(d=2, gamma=1.5)
    x, p, m = quasi_random_points(2, 50)
    st_ = eval_stack(model, x, p, m)
    want = np.linalg.eigvalsh(-4 * st_.H_m[:, None, None] * m[:, None, None] * st_.H_pp)[:, 0]
    np.testing.assert_allclose(ellipticity_gap(model, x, p, m), want, rtol=1e-12)
    assert np.all(want > 0)


def test_gap_congestion_alpha_one_c0_zero_positive_on_box():
    model = congestion_model(alpha=1.0, c0=0.0)
    P, M = np.meshgrid(np.linspace(-5, 5, 41), np.geomspace(0.1, 10, 41))
    n = P.size
    x = np.tile(np.linspace(0, 1, 7, endpoint=False), n // 7 + 1)[:n, None]
    assert np.all(ellipticity_gap(model, x, P.reshape(-1, 1), M.ravel()) > 0)


def test_gap_congestion_alpha_four_goes_negative():
    model = congestion_model(alpha=4.0, c0=0.1)
    gap = ellipticity_gap(model, [[0.0]], [[3.0]], np.array([0.5]))
    assert gap[0] < 0


def test_spatial_block_of_A_positive_where_gap_positive():
    model = congestion_model(d=2)
    x, p, m = quasi_random_points(2, 200)
    asm = assemble(model, x, p, model.hamiltonian(x, p, m))
    assert np.all(ellipticity_gap(model, x, p, asm.m) > 0)
    assert np.all(np.linalg.eigvalsh(asm.A[:, :2, :2])[:, 0] > 0)


# --- linearisation ------------------------------------------------------------------------

def test_linearization_sql_zero_hessian_and_flat_potential():
    model = sql_model(kappa_V=0.0)
    lin = linearization_coefficients(model, GradientPoint(x=[0.2], p=[0.7], s=0.1), np.zeros((2, 2)))
    assert np.all(lin.trace_A == 0) and np.all(lin.b == 0)
    assert np.all(lin.trace_A_x == 0) and lin.dx_b == 0


MODELS = [sql_model(), congestion_model(), power_model(), coupled_model(1), sql_model(d=2),
          congestion_model(d=2), coupled_model(2)]
IDS = ["sql1", "cong1", "power1", "coupled1", "sql2", "cong2", "coupled2"]


@pytest.mark.parametrize("model", MODELS, ids=IDS)
def test_linearization_matches_fd_of_pointwise_operator(model):
    d = model.d
    rng = np.random.default_rng(1)
    x, p, m = quasi_random_points(d, 100, p_max=2.0)
    s = model.hamiltonian(x, p, m)
    eps = 1e-6
    for i in range(100):
        Hs = rng.normal(size=(d + 1, d + 1))
        Hs = Hs + Hs.T
        q = rng.normal(size=d + 1)
        lin = linearization_coefficients(model, GradientPoint(x=x[i], p=p[i], s=s[i]), Hs)
        Q = lambda dq: pointwise_Q(model, x[i:i + 1], p[i:i + 1] + dq[:d], s[i] + dq[d], Hs)[0]  # noqa: E731
        fd = (Q(eps * q) - Q(-eps * q)) / (2 * eps)
        assert lin.operator() @ q == pytest.approx(fd, rel=1e-5, abs=1e-7)


@pytest.mark.parametrize("model", [coupled_model(1), coupled_model(2)], ids=["coupled1", "coupled2"])
def test_x_derivative_terms_match_fd_at_frozen_gradient(model):
    d = model.d
    rng = np.random.default_rng(2)
    x, p, m = quasi_random_points(d, 30, p_max=2.0)
    s = model.hamiltonian(x, p, m)
    h = 1e-6
    for i in range(30):
        Hs = rng.normal(size=(d + 1, d + 1))
        Hs = Hs + Hs.T
        lin = linearization_coefficients(model, GradientPoint(x=x[i], p=p[i], s=s[i]), Hs)
        for k in range(d):
            e = np.eye(d)[k] * h
            A_p, A_m = (assemble(model, x[i:i + 1] + sg * e, p[i:i + 1], s[i:i + 1]) for sg in (1, -1))
            trA = (np.sum(A_p.A[0] * Hs) - np.sum(A_m.A[0] * Hs)) / (2 * h)
            assert lin.trace_A_x[k] == pytest.approx(trA, rel=1e-5, abs=1e-7)
        db = 0.0
        for k in range(d):
            e = np.eye(d)[k] * h
            b_p = assemble(model, x[i:i + 1] + e, p[i:i + 1], s[i:i + 1]).b[0]
            b_m = assemble(model, x[i:i + 1] - e, p[i:i + 1], s[i:i + 1]).b[0]
            db += p[i, k] * (b_p - b_m) / (2 * h)
        assert lin.dx_b == pytest.approx(db, rel=1e-5, abs=1e-7)


# --- Bernstein identities against a manufactured field --------------------------------------

def _manufactured(d):
    xs = sp.symbols(" ".join(f"y{i}" for i in range(d)), real=True)
    xs = xs if isinstance(xs, tuple) else (xs,)
    t = sp.Symbol("t", real=True)
    tp = 2 * sp.pi
    u = sp.Rational(3, 10) * sp.sin(tp * xs[0]) * sp.cos(t) + sp.Rational(1, 5) * t**2 - t / 10
    if d == 2:
        u += sp.Rational(1, 10) * sp.cos(tp * (xs[0] + xs[1])) * (1 + t)
    return xs, t, u


def _derivs(expr, vars_):
    D = [sp.diff(expr, v) for v in vars_]
    D2 = [[sp.diff(expr, a, b) for b in vars_] for a in vars_]
    return sp.lambdify(vars_, D), sp.lambdify(vars_, D2)


@pytest.mark.parametrize("d", [1, 2])
def test_bernstein_identities_on_manufactured_field(d):
    """L_u(Phi(Du)) equals bernstein_rhs plus the forcing term D_q Phi . D(Qu)."""
    model = coupled_model(d)
    xs, t, u = _manufactured(d)
    vars_ = (*xs, t)
    Du, D2u = _derivs(u, vars_)
    phis = {"half_p2": sum(sp.diff(u, v) ** 2 for v in xs) / 2, "s": sp.diff(u, t)}

    def Q_at(pt):
        g = np.array(Du(*pt), dtype=float)
        return pointwise_Q(model, pt[None, :d], g[None, :d], g[d], np.array(D2u(*pt), dtype=float))[0]

    h, eps = 1e-5, 1e-6
    rng = np.random.default_rng(3)
    for _ in range(6):
        pt = np.concatenate([rng.uniform(0, 1, d), rng.uniform(0.1, 0.9, 1)])
        g = np.array(Du(*pt), dtype=float)
        hess = np.array(D2u(*pt), dtype=float)
        asm = assemble(model, pt[None, :d], g[None, :d], g[d])
        DQ = np.array([(Q_at(pt + h * e) - Q_at(pt - h * e)) / (2 * h) for e in np.eye(d + 1)])
        for name, phi in phis.items():
            Dv, D2v = _derivs(phi, vars_)
            dv, d2v = np.array(Dv(*pt), dtype=float), np.array(D2v(*pt), dtype=float)
            Lv = (pointwise_Q(model, pt[None, :d], (g + eps * dv)[None, :d], g[d] + eps * dv[d], hess + eps * d2v)[0]
                   - pointwise_Q(model, pt[None, :d], (g - eps * dv)[None, :d], g[d] - eps * dv[d], hess - eps * d2v)[0]
                   ) / (2 * eps)
            # L_u v = -tr(A D2v) - D_q tr(A D2u).Dv + D_q b.Dv is the derivative of Q along (Dv, D2v)
            forcing = DQ[d] if name == "s" else float(g[:d] @ DQ[:d])
            rhs = bernstein_rhs(asm, hess, name)[0] + forcing
            assert Lv == pytest.approx(rhs, rel=1e-5, abs=1e-6), name


def test_bernstein_rhs_rejects_other_phi():
    asm = assemble(sql_model(), [[0.1]], [[0.2]], [0.0])
    with pytest.raises(ValueError):
        bernstein_rhs(asm, np.zeros((2, 2)), "cube")
