"""Sweep the congestion exponent and watch the ellipticity gap along the continuation.

For alpha = 1 the gap stays positive; for alpha = 4 with a strong potential it turns
negative or the continuation stalls.
"""
from emfg.discretization import SpaceTimeGrid
from emfg.errors import ContinuationStall
from emfg.models import congestion_model
from emfg.solver import continuation_solve


def run(alpha, c0, kappa_V, N=32):
    model = congestion_model(alpha=alpha, c0=c0, kappa_V=kappa_V)
    grid = SpaceTimeGrid(d=1, Nx=N, Nt=N)
    try:
        _, trace = continuation_solve(model, grid)
        status = "reached theta=1"
    except ContinuationStall as err:
        trace, status = err.trace, f"stalled at theta={err.theta:.3f}"
    print(f"alpha={alpha:<4} c0={c0:<4} kappa_V={kappa_V:<4} {status:22s} min gap {trace.min_gap:+.3f}")


if __name__ == "__main__":
    for alpha, c0, kappa_V in ((1.0, 1.0, 0.1), (2.0, 0.5, 0.1), (3.0, 0.1, 0.5), (4.0, 0.1, 1.0)):
        run(alpha, c0, kappa_V)
