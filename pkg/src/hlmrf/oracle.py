"""Reference solvers for small problems, used to cross-check the BCD path.

active_set_oracle enumerates candidate active sets of the dual's
nonnegativity constraints in order of increasing cardinality. For a trial
set S it solves the unconstrained stationarity system restricted to S,

    G[S,S] mu_S = 2 b_S - u_S,   G = A Dt A',  u = A Dt c,

then accepts the first candidate that passes the full KKT certificate:
nonnegative multipliers, vanishing gradient on S, nonnegative gradient off
S, a feasible recovered primal, and a vanishing primal-dual gap. The last
two are redundant in exact arithmetic but reject ill-conditioned trial
solves. Cost grows combinatorially, so the oracle refuses problems with
more than 24 dual rows and gives up past a candidate budget.

projected_subgradient is a deliberately naive primal baseline: gradient
steps on the quadratic objective plus a large fixed penalty on constraint
violation, projected onto the box. Slow but independent of every piece of
dual machinery.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, islice

import numpy as np

from .model import GroundedModel, HingePotential, HardConstraint
from . import lcqp as L

__all__ = ["OracleSolution", "OracleError", "active_set_oracle",
           "projected_subgradient", "random_model"]

MAX_ORACLE_ROWS = 24
DEFAULT_BUDGET = 2_000_000
_CHUNK = 32768  # candidate systems factored per batched LAPACK call


class OracleError(RuntimeError):
    pass


@dataclass
class OracleSolution:
    mu: np.ndarray
    nu: np.ndarray
    objective: float        # primal objective at nu
    dual_value: float       # equals objective when strong duality holds
    active_set: np.ndarray  # rows with mu > 0
    unique_dual: bool       # active rows of A linearly independent
    candidates_tried: int


def active_set_oracle(lcqp, g=None, *, budget: int = DEFAULT_BUDGET,
                      tol: float = 1e-9) -> OracleSolution:
    """Exact dual minimizer by KKT enumeration. Raises OracleError when the
    problem is too large, the budget runs out, or no candidate passes
    (which for a well-posed compile means the primal is infeasible)."""
    R = lcqp.n_rows
    if R > MAX_ORACLE_ROWS:
        raise OracleError(f"{R} dual rows exceed the oracle limit "
                          f"{MAX_ORACLE_ROWS}")
    b = L.build_b(lcqp, g)
    dt = L.dtilde(lcqp)
    Ad = lcqp.A.multiply(dt[None, :]).tocsr()  # A Dt
    G = (Ad @ lcqp.A.T).toarray()
    u = np.asarray(Ad @ lcqp.c).ravel()
    rhs_full = 2.0 * b - u

    scale = 1.0 + float(np.abs(rhs_full).max(initial=0.0))
    tried = 0
    for k in range(R + 1):
        combos = combinations(range(R), k)
        while True:
            chunk = list(islice(combos, _CHUNK))
            if not chunk:
                break
            if tried + len(chunk) > budget:
                chunk = chunk[:budget - tried]
                if not chunk:
                    raise OracleError(f"candidate budget {budget} exhausted")
            idxs = np.asarray(chunk, dtype=int)          # (n, k)
            n = idxs.shape[0]
            if k:
                GS = G[idxs[:, :, None], idxs[:, None, :]]
                rhs = rhs_full[idxs]
                # pinv tolerates the many exactly singular candidates
                # (complementary bound-row pairs); junk solutions are
                # rejected by the stationarity check below
                try:
                    sol = np.einsum("nkj,nj->nk", np.linalg.pinv(GS), rhs)
                except np.linalg.LinAlgError:
                    sol = np.empty_like(rhs)
                    for i in range(n):
                        sol[i], *_ = np.linalg.lstsq(GS[i], rhs[i],
                                                     rcond=None)
                sol = np.where(np.isfinite(sol), sol, np.inf)
                ok = sol.min(axis=1) >= -tol
                # gradient of h: zero on S, nonnegative elsewhere
                grad = 0.5 * np.einsum("rnk,nk->nr", G[:, idxs], sol)
                grad += 0.5 * u - b
                on_s = np.take_along_axis(grad, idxs, axis=1)
                ok &= np.abs(on_s).max(axis=1) <= 1e-7 * scale
                masked = grad.copy()
                np.put_along_axis(masked, idxs, np.inf, axis=1)
                ok &= masked.min(axis=1) >= -1e-8 * scale
            else:
                sol = np.zeros((n, 0))
                grad0 = 0.5 * u - b
                ok = np.array([grad0.min(initial=0.0) >= -1e-8 * scale])
            for i in np.nonzero(ok)[0]:
                mu = np.zeros(R)
                if k:
                    mu[idxs[i]] = np.maximum(sol[i], 0.0)
                nu = L.dual_to_primal(lcqp, mu)
                if float((lcqp.A @ nu + b).max(initial=0.0)) > 1e-7 * scale:
                    continue
                obj = L.primal_objective(lcqp, nu, g)
                dual_val = (-L.dual_objective(lcqp, mu, g)
                            - L.dual_constant(lcqp))
                if obj - dual_val > 1e-6 * (1.0 + abs(obj)):
                    continue
                active = np.nonzero(mu > tol)[0]
                if active.size:
                    rank = np.linalg.matrix_rank(lcqp.A[active].toarray())
                    unique = bool(rank == active.size)
                else:
                    unique = True
                return OracleSolution(
                    mu=mu, nu=nu, objective=obj,
                    dual_value=dual_val, active_set=active,
                    unique_dual=unique, candidates_tried=tried + int(i) + 1)
            tried += len(chunk)
    raise OracleError("no KKT point found; the primal is infeasible")


def projected_subgradient(lcqp, g=None, *, steps: int = 20000,
                          step_size: float = 1e-3,
                          penalty: float = 1e3) -> np.ndarray:
    """Penalized projected gradient descent on the primal. Returns nu."""
    b = L.build_b(lcqp, g)
    A = lcqp.A
    D = lcqp.D_diag + lcqp.epsilon
    nu = np.zeros(lcqp.n_cols)
    nu[lcqp.target_slice] = 0.5
    lo = np.full(lcqp.n_cols, -np.inf)
    hi = np.full(lcqp.n_cols, np.inf)
    lo[lcqp.target_slice] = 0.0
    hi[lcqp.target_slice] = 1.0
    lin = lcqp.col_kind == L.COL_LIN_SLACK
    lo[lin] = 0.0
    for _ in range(steps):
        viol = np.maximum(A @ nu + b, 0.0)
        grad = 2.0 * D * nu + lcqp.c + penalty * (A.T @ viol)
        nu = np.clip(nu - step_size * grad, lo, hi)
    return nu


def random_model(seed: int, *, n_y: int = 4, n_pot: int = 5, n_con: int = 1,
                 r: int = 2, n_g: int = 0, max_arity: int = 3,
                 p_linear: float = 0.5) -> GroundedModel:
    """Small random grounded model, feasible by construction: every hard
    constraint is shifted to hold at y = 1/2."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 2.0, size=r)
    pots = []
    for _ in range(n_pot):
        arity = int(rng.integers(1, max_arity + 1))
        ys = rng.choice(n_y, size=min(arity, n_y), replace=False)
        coeffs = {int(v): float(rng.uniform(-1.5, 1.5)) for v in ys}
        gmap = {}
        if n_g and rng.random() < 0.5:
            gmap = {int(rng.integers(n_g)): float(rng.uniform(-1.0, 1.0))}
        pots.append(HingePotential(
            y=coeffs, x={}, g=gmap, b=float(rng.uniform(-0.5, 0.5)),
            p=1 if rng.random() < p_linear else 2,
            partition=int(rng.integers(r))))
    cons = []
    for _ in range(n_con):
        arity = int(rng.integers(1, max_arity + 1))
        ys = rng.choice(n_y, size=min(arity, n_y), replace=False)
        coeffs = {int(v): float(rng.uniform(-1.0, 1.0)) for v in ys}
        at_half = 0.5 * sum(coeffs.values())
        margin = float(rng.uniform(0.05, 0.3))
        cons.append(HardConstraint(y=coeffs, x={}, g={},
                                   b=float(-at_half - margin)))
    return GroundedModel(n_y=n_y, x_sy=np.zeros(0), n_g=n_g, r=r,
                         w_sy=w, potentials=pots, constraints=cons)
