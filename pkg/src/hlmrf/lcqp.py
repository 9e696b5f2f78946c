"""Compilation of grounded models into slack-form LCQPs and their duals.

The inference problem min_y E(y, g) + eps*||.||^2 over the box and the hard
constraints is rewritten with one slack variable per potential:

    min_nu  nu'(D + eps*I)nu + c'nu   s.t.  A nu + b <= 0

where nu stacks squared-potential slacks, linear-potential slacks, and the
target variables, in that order. D carries the squared-potential weights on
the matching slack coordinates, c carries the linear-potential weights.
Row order of A: hard constraints, potential rows (squared then linear, file
order within each), linear-slack nonnegativity rows, target lower bounds,
target upper bounds. The strictly convex dual

    h(mu) = 1/4 mu'A(D+eps)^-1 A'mu + 1/2 (A(D+eps)^-1 c - 2b)'mu,  mu >= 0

recovers the primal through nu(mu) = -1/2 (D+eps)^-1 (A'mu + c). The true
dual value includes a constant the quadratic form drops:
g_dual(mu) = -h(mu) - 1/4 c'(D+eps)^-1 c, which is what the reported
primal-dual gap is measured against.

Symbolic inputs are folded into the row offsets at compile time; neural slot
coefficients stay symbolic in B_g so b(g) = b_base + B_g g can be rebuilt
per solve. Compiles may clamp a subset of targets to fixed values (latent
inference); clamped coordinates fold into b_base and their box rows drop.
"""
from __future__ import annotations

from dataclasses import dataclass, replace as _dc_replace

import numpy as np
import scipy.sparse as sp

from .model import GroundedModel, ModelError, potential_vector, validate

__all__ = [
    "LCQPError",
    "CompiledLCQP",
    "compile_model",
    "with_weights",
    "proximal_lcqp",
    "build_b",
    "dtilde",
    "primal_objective",
    "dual_objective",
    "dual_to_primal",
    "clamp_feasible",
    "primal_dual_gap",
    "ValueResult",
    "value_function",
    "slot_cotangent",
    "neural_weight_subgradient",
    "debug_dump",
]

COL_SQ_SLACK, COL_LIN_SLACK, COL_TARGET = 0, 1, 2


class LCQPError(ValueError):
    """Raised on malformed compile inputs or unusable duals."""


@dataclass
class CompiledLCQP:
    A: sp.csr_matrix            # (R, N) constraint matrix
    b_base: np.ndarray          # (R,) offsets with x_sy and clamps folded in
    B_g: sp.csr_matrix          # (R, n_g) neural-slot coefficients per row
    D_diag: np.ndarray          # (N,) weight part of the quadratic diagonal
    c: np.ndarray               # (N,) linear term
    epsilon: float
    q: int                      # hard-constraint rows
    m_sq: int                   # squared potentials
    m_lin: int                  # linear potentials
    n_free: int                 # target columns in this compile
    col_kind: np.ndarray        # (N,) COL_* codes
    col_partition: np.ndarray   # (N,) weight partition per slack col, -1 else
    pot_rows: np.ndarray        # (m,) row of each potential, file order
    pot_cols: np.ndarray        # (m,) slack column of each potential
    pot_bound_rows: np.ndarray  # (m,) slack-nonneg row, -1 for squared
    free_vars: np.ndarray       # (n_free,) original target index per column
    clamp_vars: np.ndarray      # (n_clamped,) clamped original indices
    clamp_values: np.ndarray    # (n_clamped,) their fixed values
    row_map: np.ndarray         # (R,) row index in the unclamped layout
    full_rows: int              # row count of the unclamped layout
    caches: dict = None         # shared by reference across reweights/prox

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def n_cols(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.m_sq + self.m_lin

    @property
    def target_slice(self) -> slice:
        return slice(self.m_sq + self.m_lin, self.n_cols)

    def lower_row(self, t: int) -> int:
        # t indexes target columns of this compile, not original variables
        return self.q + self.m + self.m_lin + t

    def upper_row(self, t: int) -> int:
        return self.q + self.m + self.m_lin + self.n_free + t

    def merge_targets(self, y_free: np.ndarray, n_y: int) -> np.ndarray:
        """Full-length target vector with clamped values filled back in."""
        y = np.empty(n_y)
        y[self.free_vars] = y_free
        y[self.clamp_vars] = self.clamp_values
        return y


def _layout_rows(q, m, m_lin, n_free):
    return q + m + m_lin + 2 * n_free


def compile_model(model: GroundedModel, epsilon: float = 0.1, *,
                  x_sy=None, clamp: dict[int, float] | None = None,
                  w_sy=None) -> CompiledLCQP:
    """Assemble the slack-form LCQP for a grounded model.

    clamp maps original target indices to fixed values; those variables are
    removed from the column space and their contributions folded into b.
    """
    validate(model)
    if epsilon < 0:
        raise LCQPError("epsilon must be nonnegative")
    x = model.x_sy if x_sy is None else np.asarray(x_sy, dtype=float)
    if x.shape != model.x_sy.shape:
        raise LCQPError("x_sy override has the wrong length")
    w = model.w_sy if w_sy is None else np.asarray(w_sy, dtype=float)
    if w.shape != (model.r,):
        raise LCQPError("weight vector has the wrong length")

    clamp = dict(clamp or {})
    for v, t in clamp.items():
        if not 0 <= v < model.n_y:
            raise LCQPError(f"clamped index {v} out of range")
        if not -1e-9 <= t <= 1 + 1e-9:
            raise LCQPError(f"clamped value for target {v} outside [0,1]")
    clamp_vars = np.array(sorted(clamp), dtype=int)
    clamp_values = np.array([float(clamp[v]) for v in clamp_vars])
    free_vars = np.array([v for v in range(model.n_y) if v not in clamp],
                         dtype=int)
    col_of_var = {int(v): i for i, v in enumerate(free_vars)}

    q = len(model.constraints)
    sq = [k for k, p in enumerate(model.potentials) if p.p == 2]
    lin = [k for k, p in enumerate(model.potentials) if p.p == 1]
    m_sq, m_lin, m = len(sq), len(lin), len(model.potentials)
    n_free = len(free_vars)
    n_cols = m + n_free
    n_rows = _layout_rows(q, m, m_lin, n_free)

    pot_rows = np.zeros(m, dtype=int)
    pot_cols = np.zeros(m, dtype=int)
    pot_bound_rows = np.full(m, -1, dtype=int)
    for i, k in enumerate(sq):
        pot_rows[k] = q + i
        pot_cols[k] = i
    for i, k in enumerate(lin):
        pot_rows[k] = q + m_sq + i
        pot_cols[k] = m_sq + i
        pot_bound_rows[k] = q + m + i

    rows, cols, vals = [], [], []
    g_rows, g_cols, g_vals = [], [], []
    b = np.zeros(n_rows)

    def fold(term, row):
        # x and clamped-target contributions land in the offset
        off = term.b
        for j, a in term.x.items():
            off += a * x[j]
        for j, a in term.y.items():
            if j in col_of_var:
                rows.append(row)
                cols.append(m + col_of_var[j])
                vals.append(a)
            else:
                off += a * clamp[j]
        for j, a in term.g.items():
            g_rows.append(row)
            g_cols.append(j)
            g_vals.append(a)
        b[row] += off

    for i, con in enumerate(model.constraints):
        fold(con, i)
    for k, pot in enumerate(model.potentials):
        fold(pot, pot_rows[k])
        rows.append(pot_rows[k])
        cols.append(pot_cols[k])
        vals.append(-1.0)
    for i in range(m_lin):
        rows.append(q + m + i)          # -s_lin <= 0
        cols.append(m_sq + i)
        vals.append(-1.0)
    for t in range(n_free):
        rows.append(q + m + m_lin + t)  # -y <= 0
        cols.append(m + t)
        vals.append(-1.0)
        rows.append(q + m + m_lin + n_free + t)  # y - 1 <= 0
        cols.append(m + t)
        vals.append(1.0)
        b[q + m + m_lin + n_free + t] = -1.0

    A = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols))
    A.sum_duplicates()
    B_g = sp.coo_matrix((g_vals, (g_rows, g_cols)), shape=(n_rows, model.n_g))
    B_g.sum_duplicates()

    col_kind = np.full(n_cols, COL_TARGET, dtype=int)
    col_kind[:m_sq] = COL_SQ_SLACK
    col_kind[m_sq:m] = COL_LIN_SLACK
    col_partition = np.full(n_cols, -1, dtype=int)
    for i, k in enumerate(sq):
        col_partition[i] = model.potentials[k].partition
    for i, k in enumerate(lin):
        col_partition[m_sq + i] = model.potentials[k].partition

    D_diag, c = _quad_terms(col_kind, col_partition, w)

    # map this compile's rows onto the unclamped layout
    full_free = model.n_y
    full_rows = _layout_rows(q, m, m_lin, full_free)
    row_map = np.arange(n_rows)
    base = q + m + m_lin
    row_map[base:base + n_free] = base + free_vars
    row_map[base + n_free:] = base + full_free + free_vars

    return CompiledLCQP(
        A=A.tocsr(), b_base=b, B_g=B_g.tocsr(), D_diag=D_diag, c=c,
        epsilon=float(epsilon), q=q, m_sq=m_sq, m_lin=m_lin, n_free=n_free,
        col_kind=col_kind, col_partition=col_partition,
        pot_rows=pot_rows, pot_cols=pot_cols, pot_bound_rows=pot_bound_rows,
        free_vars=free_vars, clamp_vars=clamp_vars, clamp_values=clamp_values,
        row_map=row_map, full_rows=full_rows, caches={},
    )


def _quad_terms(col_kind, col_partition, w):
    D_diag = np.zeros(len(col_kind))
    c = np.zeros(len(col_kind))
    sq = col_kind == COL_SQ_SLACK
    lin = col_kind == COL_LIN_SLACK
    D_diag[sq] = w[col_partition[sq]]
    c[lin] = w[col_partition[lin]]
    return D_diag, c


def with_weights(lcqp: CompiledLCQP, w_sy) -> CompiledLCQP:
    """Same structure, new partition weights. A, b, B_g and the block cache
    are shared; only D and c are rebuilt."""
    w = np.asarray(w_sy, dtype=float)
    D_diag, c = _quad_terms(lcqp.col_kind, lcqp.col_partition, w)
    return _dc_replace(lcqp, D_diag=D_diag, c=c)


def proximal_lcqp(lcqp: CompiledLCQP, y_center, rho: float) -> CompiledLCQP:
    """LCQP whose optimum is the prox point of the energy at y_center.

    Adds 1/(2 rho) to the target diagonal and -y_j/rho to the target linear
    term; the dropped constant ||y_center||^2/(2 rho) is restored by the
    envelope evaluation, not here.
    """
    if rho <= 0:
        raise LCQPError("rho must be positive")
    y_center = np.asarray(y_center, dtype=float)
    if y_center.shape != (lcqp.n_free,):
        raise LCQPError("prox center has the wrong length")
    D_diag = lcqp.D_diag.copy()
    c = lcqp.c.copy()
    ts = lcqp.target_slice
    D_diag[ts] += 1.0 / (2.0 * rho)
    c[ts] -= y_center / rho
    return _dc_replace(lcqp, D_diag=D_diag, c=c)


def build_b(lcqp: CompiledLCQP, g=None) -> np.ndarray:
    if lcqp.B_g.shape[1] == 0:
        return lcqp.b_base
    if g is None:
        if lcqp.B_g.nnz == 0:
            return lcqp.b_base
        raise LCQPError("model uses neural slots but no g values were given")
    g = np.asarray(g, dtype=float)
    if g.shape != (lcqp.B_g.shape[1],):
        raise LCQPError("g has the wrong length")
    return lcqp.b_base + lcqp.B_g @ g


def dtilde(lcqp: CompiledLCQP) -> np.ndarray:
    """(D + eps*I)^-1 diagonal; requires strict positivity."""
    d = lcqp.D_diag + lcqp.epsilon
    if d.size and d.min() <= 0.0:
        raise LCQPError(
            "dual operations need D + eps*I strictly positive; "
            "raise epsilon or the offending partition weight")
    return 1.0 / d


def primal_objective(lcqp: CompiledLCQP, nu, g=None) -> float:
    nu = np.asarray(nu, dtype=float)
    quad = (lcqp.D_diag + lcqp.epsilon) * nu
    return float(nu @ quad + lcqp.c @ nu)


def dual_objective(lcqp: CompiledLCQP, mu, g=None) -> float:
    """Quadratic dual form h(mu); minimized over mu >= 0."""
    mu = np.asarray(mu, dtype=float)
    dt = dtilde(lcqp)
    t = lcqp.A.T @ mu
    b = build_b(lcqp, g)
    return float(0.25 * (dt * t) @ t + 0.5 * (dt * lcqp.c) @ t - b @ mu)


def dual_constant(lcqp: CompiledLCQP) -> float:
    """Constant 1/4 c'(D+eps)^-1 c linking h to the true dual value."""
    dt = dtilde(lcqp)
    return float(0.25 * (dt * lcqp.c) @ lcqp.c)


def dual_to_primal(lcqp: CompiledLCQP, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    return -0.5 * dtilde(lcqp) * (lcqp.A.T @ mu + lcqp.c)


def _pot_target_matrix(lcqp: CompiledLCQP):
    # cached on the compile, shared with reweighted/prox variants (same A)
    if "pot_target" not in lcqp.caches:
        block = lcqp.A[lcqp.pot_rows][:, lcqp.target_slice] if lcqp.m else \
            sp.csr_matrix((0, lcqp.n_free))
        lcqp.caches["pot_target"] = block.tocsr()
    return lcqp.caches["pot_target"]


def clamp_feasible(lcqp: CompiledLCQP, nu, g=None) -> np.ndarray:
    """Project a recovered point onto the box and retighten the slacks.

    Targets are clipped to [0,1]; every slack is reset to the exact hinge
    value of its potential row at the clipped targets, which satisfies the
    potential and slack-bound rows exactly.
    """
    nu = np.asarray(nu, dtype=float)
    y = np.clip(nu[lcqp.target_slice], 0.0, 1.0)
    out = np.empty_like(nu)
    out[lcqp.target_slice] = y
    if lcqp.m:
        b = build_b(lcqp, g)
        hinge = _pot_target_matrix(lcqp) @ y + b[lcqp.pot_rows]
        out[lcqp.pot_cols] = np.maximum(hinge, 0.0)
    return out


def primal_dual_gap(lcqp: CompiledLCQP, mu, g=None, nu=None):
    """(gap, feasible nu). Gap is primal value at the clamped recovery minus
    the corrected dual value; nonnegative up to roundoff once feasible."""
    if nu is None:
        nu = dual_to_primal(lcqp, mu)
    nu_f = clamp_feasible(lcqp, nu, g)
    primal = primal_objective(lcqp, nu_f, g)
    dual = -dual_objective(lcqp, mu, g) - dual_constant(lcqp)
    return primal - dual, nu_f


@dataclass
class ValueResult:
    value: float            # optimal objective, clamp-corrected
    y: np.ndarray           # full-length minimizing targets
    nu: np.ndarray          # feasible primal point of this compile
    mu: np.ndarray          # dual point of this compile
    phi: np.ndarray         # potential vector at y
    grad_b: np.ndarray      # dual mapped onto the unclamped row layout
    lcqp: CompiledLCQP
    stats: object


def value_function(model: GroundedModel, g=None, *, epsilon: float = 0.1,
                   x_sy=None, clamp: dict[int, float] | None = None,
                   config=None, warm_start=None,
                   lcqp: CompiledLCQP | None = None) -> ValueResult:
    """Optimal value of inference plus everything its gradients need.

    With clamp, the reported value includes the regularizer contribution
    eps*sum(t^2) of the clamped coordinates so that values at different
    clamp sets measure the same objective (restriction only shrinks the
    feasible set, so clamped values always dominate the free value).
    """
    from . import solver  # local import; solver builds on this module

    if lcqp is None:
        lcqp = compile_model(model, epsilon, x_sy=x_sy, clamp=clamp)
    res = solver.solve(lcqp, g=g, config=config, warm_start=warm_start)
    value = res.objective + lcqp.epsilon * float(lcqp.clamp_values @ lcqp.clamp_values)
    y_full = lcqp.merge_targets(res.nu[lcqp.target_slice], model.n_y)
    phi = potential_vector(model, y_full, g, x_sy)
    grad_b = np.zeros(lcqp.full_rows)
    grad_b[lcqp.row_map] = res.mu
    return ValueResult(value=value, y=y_full, nu=res.nu, mu=res.mu, phi=phi,
                       grad_b=grad_b, lcqp=lcqp, stats=res.stats)


def slot_cotangent(lcqp: CompiledLCQP, mu) -> np.ndarray:
    """Pull a dual vector back through b(g) = b_base + B_g g."""
    return lcqp.B_g.T @ np.asarray(mu, dtype=float)


def neural_weight_subgradient(lcqp: CompiledLCQP, mu, vjp):
    """Gradient of the value function in the neural weights: the dual at the
    optimum pulled through B_g, then through the head's vector-Jacobian
    product."""
    return vjp(slot_cotangent(lcqp, mu))


def debug_dump(lcqp: CompiledLCQP) -> dict:
    """Dense matrices plus human-readable row/column labels. Tiny problems
    only; meant for eyeballing layouts in tests and notebooks."""
    row_labels = []
    for i in range(lcqp.q):
        row_labels.append(f"con[{i}]")
    order = np.argsort(lcqp.pot_rows)
    for k in order:
        kind = "sq" if lcqp.pot_bound_rows[k] < 0 else "lin"
        row_labels.append(f"pot_{kind}[{k}]")
    for k in order:
        if lcqp.pot_bound_rows[k] >= 0:
            row_labels.append(f"slack_lb[{k}]")
    for v in lcqp.free_vars:
        row_labels.append(f"y_lb[{v}]")
    for v in lcqp.free_vars:
        row_labels.append(f"y_ub[{v}]")
    col_labels = []
    for j in range(lcqp.n_cols):
        if lcqp.col_kind[j] == COL_SQ_SLACK:
            col_labels.append(f"s_sq[{j}]")
        elif lcqp.col_kind[j] == COL_LIN_SLACK:
            col_labels.append(f"s_lin[{j}]")
        else:
            col_labels.append(f"y[{lcqp.free_vars[j - lcqp.m]}]")
    return {
        "A": lcqp.A.toarray(),
        "b_base": lcqp.b_base.copy(),
        "B_g": lcqp.B_g.toarray(),
        "D_diag": lcqp.D_diag.copy(),
        "c": lcqp.c.copy(),
        "row_labels": row_labels,
        "col_labels": col_labels,
    }
