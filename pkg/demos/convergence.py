"""Self-convergence of u and m on three nested grids."""
from emfg.discretization import SpaceTimeGrid
from emfg.models import congestion_model, sql_model
from emfg.verification import self_convergence

if __name__ == "__main__":
    grids = [SpaceTimeGrid(d=1, Nx=n, Nt=n) for n in (16, 32, 64)]
    for name, model in (("sql", sql_model()), ("congestion", congestion_model())):
        rep = self_convergence(model, grids)
        print(f"{name:11s} order u {rep.order_u:.3f}  order m {rep.order_m:.3f}  "
              f"continuity residual ratios {[round(r, 2) for r in rep.continuity_ratios]}")
