"""Weight learning for grounded hinge-loss models.

Two regimes share the optimizer plumbing:

* value losses (``energy``, ``sp``): plain first-order descent on a loss
  built from one or two value-function solves per sample, with gradients
  assembled from potential vectors and duals rather than by differentiating
  through the inference trajectory.

* supervised losses (``mse``, ``bce``): a bilevel program. Each sample gets
  a decision vector y_i tied to the energy's near-minimizers through the
  smoothed constraint M_i(y_i) - V_i <= iota, where M_i is the Moreau
  envelope of the regularized energy and V_i its optimal value. The
  constraint is enforced with an augmented Lagrangian (slacks s_i,
  multipliers lambda_i, growing penalty), the relaxation iota is halved
  every time the subproblem is solved to tolerance, and the inner
  minimization runs seeded incremental first-order epochs: mirror descent
  keeps w_sy on the unit simplex, an adaptive-moment step moves the neural
  weights, and projected gradient steps move each y_i (box) and s_i
  (nonnegative orthant).

Every inference call inside learning (full, latent, prox) is warm-started
from the previous duals of the same sample and kind.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import GroundedModel
from . import lcqp as L
from . import neural
from .solver import SolverConfig

__all__ = [
    "LearnError",
    "TrainingSample",
    "LearnConfig",
    "AdamState",
    "LearnerState",
    "LearnResult",
    "supervised_loss",
    "mirror_descent_step",
    "adaptive_moment_step",
    "latent_inference",
    "energy_loss",
    "sp_loss",
    "moreau_envelope",
    "augmented_lagrangian",
    "init_state",
    "inner_solve",
    "outer_loop",
    "fit_value_loss",
    "learn",
    "prediction_loss",
]

BCE_CLAMP = 1e-7
LOSSES = ("energy", "sp", "mse", "bce")


class LearnError(ValueError):
    pass


@dataclass
class TrainingSample:
    """Labels are a sparse map target-index -> value in [0,1]; every other
    target is latent. x_sy/x_nn override the model's symbolic inputs and
    feed the neural head; a fixed g bypasses the head entirely."""
    labels: dict
    x_sy: np.ndarray | None = None
    x_nn: np.ndarray | None = None
    g: np.ndarray | None = None

    def __post_init__(self):
        self.labels = {int(k): float(v) for k, v in self.labels.items()}
        for k, v in self.labels.items():
            if k < 0:
                raise LearnError(f"negative label index {k}")
            if not 0.0 <= v <= 1.0:
                raise LearnError(f"label {k} value {v} outside [0,1]")
        if self.x_sy is not None:
            self.x_sy = np.asarray(self.x_sy, dtype=float)
        if self.x_nn is not None:
            self.x_nn = np.asarray(self.x_nn, dtype=float)
        if self.g is not None:
            self.g = np.asarray(self.g, dtype=float)
        idx = np.asarray(sorted(self.labels), dtype=int)
        self.label_index = idx
        self.label_values = np.asarray([self.labels[k] for k in idx])

    def check(self, model: GroundedModel):
        if self.label_index.size and self.label_index[-1] >= model.n_y:
            raise LearnError("label index out of range for the model")

    def latent_indices(self, n_y: int) -> np.ndarray:
        mask = np.ones(n_y, dtype=bool)
        mask[self.label_index] = False
        return np.nonzero(mask)[0]


@dataclass
class LearnConfig:
    loss: str = "mse"
    energy_coefficient: float = 0.1
    step_w_sy: float = 5e-2
    step_w_nn: float = 1e-3
    step_y: float = 0.01
    neg_log_reg: float = 1e-3
    sigma_star: float = 1e-2
    omega_star: float = 1e-2
    max_outer: int = 3
    max_inner: int = 500
    epsilon: float = 0.1
    rho: float = 0.01
    penalty_init: float = 2.0
    patience: int = 50
    movement_tol: float = 1e-3   # value-loss stop on parameter movement
    head: neural.DifferentiableHead | None = None
    inference: SolverConfig = field(
        default_factory=lambda: SolverConfig(delta=1e-2))

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise LearnError(f"unknown loss {self.loss!r}")
        if min(self.step_w_sy, self.step_w_nn, self.step_y) <= 0:
            raise LearnError("steplengths must be positive")
        if self.energy_coefficient < 0 or self.neg_log_reg < 0:
            raise LearnError("coefficients must be nonnegative")
        if self.penalty_init <= 1:
            raise LearnError("penalty must start above 1")
        if self.rho <= 0:
            raise LearnError("rho must be positive")


# ---------------------------------------------------------------------------
# optimizer steps

def mirror_descent_step(w, grad, eta: float) -> np.ndarray:
    """Exponentiated-gradient step on the unit simplex.

    w'_j = w_j exp(-eta grad_j) / sum_k w_k exp(-eta grad_k); the exponent
    is shifted by its max so large gradients cannot overflow.
    """
    w = np.asarray(w, dtype=float)
    if not np.all(w > 0.0):
        raise LearnError("mirror descent needs strictly positive weights")
    z = -eta * np.asarray(grad, dtype=float)
    z -= z.max()
    out = w * np.exp(z)
    return out / out.sum()


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, w):
        return cls(m=np.zeros_like(w), v=np.zeros_like(w))


def adaptive_moment_step(w, grad, state: AdamState, *, step: float = 1e-3,
                         beta1: float = 0.9, beta2: float = 0.999,
                         eps: float = 1e-8):
    """Standard bias-corrected first/second-moment update."""
    grad = np.asarray(grad, dtype=float)
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    return w - step * mhat / (np.sqrt(vhat) + eps), state


def supervised_loss(d_kind: str, y, t):
    """Differentiable fit term over aligned label arrays.

    mse: mean squared error. bce: mean binary cross-entropy with
    predictions clamped to [1e-7, 1 - 1e-7]; the gradient is zero where the
    clamp is active. Returns (value, grad_y).
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    if y.shape != t.shape:
        raise LearnError("prediction/label shapes differ")
    if y.size == 0:
        return 0.0, np.zeros_like(y)
    n = y.size
    if d_kind == "mse":
        r = y - t
        return float(r @ r / n), 2.0 * r / n
    if d_kind == "bce":
        yh = np.clip(y, BCE_CLAMP, 1.0 - BCE_CLAMP)
        value = float(np.mean(-t * np.log(yh) - (1 - t) * np.log1p(-yh)))
        live = (y > BCE_CLAMP) & (y < 1.0 - BCE_CLAMP)
        grad = np.where(live, (-t / yh + (1 - t) / (1 - yh)) / n, 0.0)
        return value, grad
    raise LearnError(f"unknown supervised loss {d_kind!r}")


# ---------------------------------------------------------------------------
# per-sample solve plumbing

class _SampleWork:
    """Compiled structures and warm duals for one training sample."""

    def __init__(self, model: GroundedModel, sample: TrainingSample,
                 epsilon: float):
        sample.check(model)
        self.sample = sample
        self.model_ref = model
        self.x_sy = sample.x_sy
        self.lcqp_full = L.compile_model(model, epsilon, x_sy=sample.x_sy)
        self.lcqp_latent = L.compile_model(model, epsilon, x_sy=sample.x_sy,
                                           clamp=sample.labels)
        self.warm: dict[str, np.ndarray] = {}
        self.inference_epochs = 0

    def infer(self, model, kind, config: SolverConfig, g, w_sy=None,
              y_center=None, rho=None) -> L.ValueResult:
        base = self.lcqp_latent if kind == "latent" else self.lcqp_full
        lq = base if w_sy is None else L.with_weights(base, w_sy)
        if kind == "prox":
            lq = L.proximal_lcqp(lq, y_center, rho)
        try:
            res = L.value_function(model, g, x_sy=self.x_sy,
                                   config=config, lcqp=lq,
                                   warm_start=self.warm.get(kind))
        except Exception as exc:
            raise LearnError(f"{kind} inference failed: {exc}") from exc
        self.warm[kind] = res.mu
        self.inference_epochs += res.stats.epochs
        return res


def _resolve_slots(sample: TrainingSample, head, w_nn):
    if sample.g is not None:
        return sample.g
    if head is not None:
        if sample.x_nn is None:
            raise LearnError("head configured but the sample has no x_nn")
        return neural.forward(head, sample.x_nn, w=w_nn)
    return None


def _check_clamped_constraints(model, sample, g, x_sy):
    # constraints fully pinned by the labels can be checked by hand, which
    # lets the error name the offender instead of a generic dual blow-up
    x = model.x_sy if x_sy is None else x_sy
    for k, con in enumerate(model.constraints):
        if not set(con.y) <= set(sample.labels):
            continue
        val = con.b
        val += sum(a * sample.labels[j] for j, a in con.y.items())
        val += sum(a * x[j] for j, a in con.x.items())
        if g is not None:
            val += sum(a * g[j] for j, a in con.g.items())
        if val > 1e-9:
            raise LearnError(
                f"hard constraint {k} is violated by the clamped labels "
                f"(lhs = {val:.4g} > 0)")


def latent_inference(model: GroundedModel, sample: TrainingSample, g=None,
                     *, epsilon: float = 0.1, config: SolverConfig | None = None,
                     work: _SampleWork | None = None):
    """Minimize the energy with labeled targets clamped to their labels.

    Returns (z_star, V_z, Phi_z, mu_z): the full-length minimizer with
    labels in place, its value (including the regularizer contribution of
    the clamped coordinates), the potential vector there, and the duals
    mapped onto the unclamped row layout.
    """
    if g is None:
        g = _resolve_slots(sample, None, None)
    if work is None:
        work = _SampleWork(model, sample, epsilon)
    _check_clamped_constraints(model, sample, g, work.x_sy)
    res = work.infer(model, "latent", config or SolverConfig(delta=1e-2), g)
    return res.y, res.value, res.phi, res.grad_b


def energy_loss(model: GroundedModel, sample: TrainingSample, g=None, *,
                epsilon: float = 0.1, config: SolverConfig | None = None,
                work: _SampleWork | None = None):
    """Latent value V_z as the loss; gradients via the potential vector and
    the mapped duals. Returns (loss, grad_w_sy, grad_b)."""
    _, value, phi, grad_b = latent_inference(
        model, sample, g, epsilon=epsilon, config=config, work=work)
    return value, phi, grad_b


def sp_loss(model: GroundedModel, sample: TrainingSample, g=None, *,
            epsilon: float = 0.1, config: SolverConfig | None = None,
            work: _SampleWork | None = None):
    """Structured-perceptron gap V_z - V_y >= 0; restriction can only raise
    the optimal value. Returns (loss, grad_w_sy, grad_b)."""
    if g is None:
        g = _resolve_slots(sample, None, None)
    if work is None:
        work = _SampleWork(model, sample, epsilon)
    config = config or SolverConfig(delta=1e-2)
    _check_clamped_constraints(model, sample, g, work.x_sy)
    lat = work.infer(model, "latent", config, g)
    full = work.infer(model, "full", config, g)
    return (lat.value - full.value, lat.phi - full.phi,
            lat.grad_b - full.grad_b)


def moreau_envelope(model: GroundedModel, sample: TrainingSample, y, g=None,
                    *, rho: float = 0.01, epsilon: float = 0.1,
                    config: SolverConfig | None = None,
                    work: _SampleWork | None = None):
    """Envelope value M(y) = min_{yhat in Omega} E(yhat) + |yhat-y|^2/(2 rho)
    of the regularized energy, its gradient (y - prox)/rho, and the prox
    point. The prox problem stays an LCQP: 1/(2 rho) joins the target
    diagonal and -y/rho the linear term."""
    y = np.asarray(y, dtype=float)
    if g is None:
        g = _resolve_slots(sample, None, None)
    if work is None:
        work = _SampleWork(model, sample, epsilon)
    res = work.infer(model, "prox", config or SolverConfig(delta=1e-2), g,
                     y_center=y, rho=rho)
    M = res.value + float(y @ y) / (2.0 * rho)
    grad_y = (y - res.y) / rho
    return M, grad_y, res.y


# ---------------------------------------------------------------------------
# augmented Lagrangian

@dataclass
class LearnerState:
    w_sy: np.ndarray
    w_nn: np.ndarray | None
    y: list                      # per-sample decision vectors
    s: np.ndarray                # per-sample slacks, >= 0
    lam: np.ndarray              # per-sample multipliers
    mu_pen: float
    iota: float
    rho: float
    adam: AdamState | None
    works: list
    rng: np.random.Generator
    total_inner_epochs: int = 0

    def params_snapshot(self):
        return (self.w_sy.copy(),
                None if self.w_nn is None else self.w_nn.copy(),
                [y.copy() for y in self.y], self.s.copy())

    def movement(self, snap) -> float:
        w0, wn0, ys0, s0 = snap
        delta = float(np.max(np.abs(self.w_sy - w0), initial=0.0))
        if self.w_nn is not None:
            delta = max(delta, float(np.max(np.abs(self.w_nn - wn0),
                                            initial=0.0)))
        for ynew, yold in zip(self.y, ys0):
            delta = max(delta, float(np.max(np.abs(ynew - yold),
                                            initial=0.0)))
        delta = max(delta, float(np.max(np.abs(self.s - s0), initial=0.0)))
        return delta


@dataclass
class ALGrads:
    w_sy: np.ndarray
    w_nn: np.ndarray | None
    y: list
    s: np.ndarray
    c: np.ndarray                # constraint values, for diagnostics


def _sample_terms(state: LearnerState, i: int, model, config: LearnConfig):
    """Solve the full/prox(/latent) triple for sample i at the current
    parameters and return everything the AL value and gradients need."""
    work = state.works[i]
    sample = work.sample
    g = _resolve_slots(sample, config.head, state.w_nn)
    solver_cfg = config.inference
    full = work.infer(model, "full", solver_cfg, g, w_sy=state.w_sy)
    prox = work.infer(model, "prox", solver_cfg, g, w_sy=state.w_sy,
                      y_center=state.y[i], rho=state.rho)
    M = prox.value + float(state.y[i] @ state.y[i]) / (2.0 * state.rho)
    lat = None
    if config.energy_coefficient > 0.0:
        lat = work.infer(model, "latent", solver_cfg, g, w_sy=state.w_sy)
    c_i = M - full.value - state.iota
    return g, full, prox, lat, M, c_i


def _neural_cotangent(work, full, prox, lat, r, coeff):
    u = r * (L.slot_cotangent(work.lcqp_full, prox.mu)
             - L.slot_cotangent(work.lcqp_full, full.mu))
    if lat is not None:
        u = u + coeff * L.slot_cotangent(work.lcqp_latent, lat.mu)
    return u


def augmented_lagrangian(state: LearnerState, samples, config: LearnConfig):
    """Value and gradients of

        sum_i [ d(y_i, t_i) + coeff * V_z,i + (mu/2)(c_i+s_i)^2
                + lambda_i (c_i+s_i) ]  +  reg * sum_j -log w_sy[j],

    with c_i = M_i(y_i) - V_i - iota. Gradients follow the value-function
    sensitivities: potential vectors for w_sy, dual differences pulled
    through the head for w_nn, (y_i - prox_i)/rho for y_i.
    """
    model = _model_with(state, samples)
    n = len(samples)
    value = 0.0
    gw = np.zeros_like(state.w_sy)
    gwn = None if state.w_nn is None else np.zeros_like(state.w_nn)
    gy = []
    gs = np.zeros(n)
    cs = np.zeros(n)
    coeff = config.energy_coefficient
    for i, sample in enumerate(samples):
        work = state.works[i]
        g, full, prox, lat, M, c_i = _sample_terms(state, i, model, config)
        resid = c_i + state.s[i]
        r = state.mu_pen * resid + state.lam[i]
        d_val, d_grad = supervised_loss(
            config.loss if config.loss in ("mse", "bce") else "mse",
            state.y[i][sample.label_index], sample.label_values)
        value += d_val + 0.5 * state.mu_pen * resid ** 2 \
            + state.lam[i] * resid
        if lat is not None:
            value += coeff * lat.value
        grad_y = np.zeros(model.n_y)
        grad_y[sample.label_index] = d_grad
        grad_y += r * (state.y[i] - prox.y) / state.rho
        gy.append(grad_y)
        gs[i] = r
        cs[i] = c_i
        gw += r * (prox.phi - full.phi)
        if lat is not None:
            gw += coeff * lat.phi
        if gwn is not None:
            u = _neural_cotangent(work, full, prox, lat, r, coeff)
            gwn += neural.vjp(config.head, sample.x_nn, u, w=state.w_nn)
    if config.neg_log_reg > 0.0:
        if state.w_sy.min() <= 0.0:
            raise LearnError("negative-log regularizer hit a zero weight")
        value += config.neg_log_reg * float(-np.log(state.w_sy).sum())
        gw -= config.neg_log_reg / state.w_sy
    return value, ALGrads(w_sy=gw, w_nn=gwn, y=gy, s=gs, c=cs)


def _model_with(state: LearnerState, samples) -> GroundedModel:
    model = state.works[0].model_ref
    return model.replace_weights(state.w_sy)


def inner_solve(state: LearnerState, samples, config: LearnConfig,
                lam, mu_pen: float, iota: float, omega: float):
    """Incremental first-order epochs on the augmented Lagrangian.

    Samples are visited in a fresh seeded random order each epoch; each
    visit re-solves that sample's inference triple (warm-started), then
    steps its y_i and s_i by projected gradient and the shared weights by
    mirror descent / adaptive moments using the sample's partial gradient
    (the regularizer is spread evenly over samples). Stops when the
    parameter movement of an epoch drops to omega or the epoch budget is
    exhausted. Returns (state, delta).
    """
    state.lam = np.asarray(lam, dtype=float)
    state.mu_pen = float(mu_pen)
    state.iota = float(iota)
    n = len(samples)
    coeff = config.energy_coefficient
    delta = np.inf
    while state.total_inner_epochs < config.max_inner:
        snap = state.params_snapshot()
        model = _model_with(state, samples)
        for i in state.rng.permutation(n):
            sample = samples[i]
            work = state.works[i]
            g, full, prox, lat, M, c_i = _sample_terms(
                state, i, model, config)
            resid = c_i + state.s[i]
            r = state.mu_pen * resid + state.lam[i]
            _, d_grad = supervised_loss(
                config.loss, state.y[i][sample.label_index],
                sample.label_values)
            grad_y = np.zeros(model.n_y)
            grad_y[sample.label_index] = d_grad
            grad_y += r * (state.y[i] - prox.y) / state.rho
            state.y[i] = np.clip(state.y[i] - config.step_y * grad_y,
                                 0.0, 1.0)
            state.s[i] = max(state.s[i] - config.step_y * r, 0.0)
            gw = r * (prox.phi - full.phi)
            if lat is not None:
                gw = gw + coeff * lat.phi
            gw = gw - config.neg_log_reg / (n * state.w_sy)
            state.w_sy = mirror_descent_step(state.w_sy, gw,
                                             config.step_w_sy)
            if state.w_nn is not None:
                u = _neural_cotangent(work, full, prox, lat, r, coeff)
                gn = neural.vjp(config.head, sample.x_nn, u, w=state.w_nn)
                state.w_nn, state.adam = adaptive_moment_step(
                    state.w_nn, gn, state.adam, step=config.step_w_nn)
            model = _model_with(state, samples)
        state.total_inner_epochs += 1
        delta = state.movement(snap)
        if delta <= omega:
            break
    return state, delta


# ---------------------------------------------------------------------------
# outer loop

@dataclass
class LearnResult:
    w_sy: np.ndarray
    w_nn: np.ndarray | None
    history: list
    converged: bool
    model: GroundedModel
    state: LearnerState | None = None


def init_state(model: GroundedModel, samples, config: LearnConfig):
    """Learner state at the prescribed start: simplex-normalized weights,
    y_i at the latent minimizer (supervised term exactly zero), iota at the
    worst envelope gap, slacks at the AL's closed-form minimizer."""
    w0 = np.asarray(model.w_sy, dtype=float)
    if w0.min() <= 0.0:
        raise LearnError("learning starts from strictly positive weights")
    w_sy = w0 / w0.sum()            # mirror descent lives on the simplex
    w_nn = None
    adam = None
    if config.head is not None:
        if config.head.w is None:
            config.head.w = neural.init_weights(config.head,
                                                config.inference.seed)
        w_nn = config.head.w.copy()
        adam = AdamState.like(w_nn)
    works = [_SampleWork(model, sample, config.epsilon)
             for sample in samples]
    state = LearnerState(
        w_sy=w_sy, w_nn=w_nn, y=[], s=np.zeros(len(samples)),
        lam=np.zeros(len(samples)), mu_pen=config.penalty_init,
        iota=0.0, rho=config.rho, adam=adam, works=works,
        rng=np.random.default_rng(config.inference.seed))
    model_w = model.replace_weights(state.w_sy)
    gaps = np.zeros(len(samples))
    for i, sample in enumerate(samples):
        work = works[i]
        g = _resolve_slots(sample, config.head, state.w_nn)
        _check_clamped_constraints(model_w, sample, g, work.x_sy)
        lat = work.infer(model_w, "latent", config.inference, g)
        state.y.append(lat.y.copy())
        full = work.infer(model_w, "full", config.inference, g)
        prox = work.infer(model_w, "prox", config.inference, g,
                          y_center=state.y[i], rho=state.rho)
        M = prox.value + float(state.y[i] @ state.y[i]) / (2.0 * state.rho)
        gaps[i] = M - full.value
    state.iota = float(max(gaps.max(), 0.0))
    c0 = gaps - state.iota
    state.s = np.maximum(-c0 - state.lam / state.mu_pen, 0.0)
    return state


def _residual_pass(state: LearnerState, samples, config: LearnConfig):
    """Fresh constraint values and the training metric at the current
    parameters; also returns the metric of full-inference predictions."""
    model = _model_with(state, samples)
    n = len(samples)
    c = np.zeros(n)
    metric = 0.0
    d_kind = config.loss if config.loss in ("mse", "bce") else "mse"
    for i, sample in enumerate(samples):
        g, full, prox, lat, M, c_i = _sample_terms(state, i, model, config)
        c[i] = c_i
        if sample.label_index.size:
            m_val, _ = supervised_loss(
                d_kind, full.y[sample.label_index], sample.label_values)
            metric += m_val
    return c, metric / max(n, 1)


def prediction_loss(model: GroundedModel, samples, *, d_kind: str = "mse",
                    epsilon: float = 0.1, head=None, w_nn=None,
                    config: SolverConfig | None = None) -> float:
    """Mean supervised loss of full-inference predictions against labels."""
    total = 0.0
    for sample in samples:
        work = _SampleWork(model, sample, epsilon)
        g = _resolve_slots(sample, head, w_nn)
        res = work.infer(model, "full", config or SolverConfig(delta=1e-2), g)
        val, _ = supervised_loss(d_kind, res.y[sample.label_index],
                                 sample.label_values)
        total += val
    return total / max(len(samples), 1)


def outer_loop(model: GroundedModel, samples, config: LearnConfig):
    """Relaxation-halving loop around the augmented-Lagrangian solver.

    Each round solves the AL subproblem at the current iota: inner epochs
    run until the movement delta reaches omega, then the multiplier/penalty
    schedule reacts to the total residual sum_i |c_i + s_i| against sigma
    (multiplier step and tighter sigma, omega on progress; doubled penalty
    and reset tolerances otherwise). A round converges when the worst
    residual is at most sigma_star and delta at most omega_star; iota is
    then halved, slacks are re-centered, and the next round starts with the
    penalty and multipliers carried over. History rows carry the training
    metric, worst residual, iota, penalty, cumulative inference epochs and
    wall time; stops early on a metric plateau (patience) or when the inner
    epoch budget runs out (non-converged result, best effort weights).
    """
    model.validate()
    samples = list(samples)
    if not samples:
        raise LearnError("no training samples")
    if config.loss not in ("mse", "bce"):
        raise LearnError("outer_loop is for the supervised losses")
    state = init_state(model, samples, config)
    history = []
    t0 = time.perf_counter_ns()
    best_metric = np.inf
    stall = 0
    converged = False
    out_of_budget = False

    for outer in range(config.max_outer):
        sigma = state.mu_pen ** -0.1
        omega = 1.0 / state.mu_pen
        round_converged = False
        round_done = False
        while not round_done:
            state, delta = inner_solve(state, samples, config, state.lam,
                                       state.mu_pen, state.iota, omega)
            c, metric = _residual_pass(state, samples, config)
            resid = c + state.s
            viol = float(np.max(np.abs(resid), initial=0.0))
            history.append({
                "epoch": state.total_inner_epochs,
                "loss": metric,
                "constraint_violation_max": viol,
                "iota": state.iota,
                "mu_pen": state.mu_pen,
                "inference_epochs_total":
                    sum(w.inference_epochs for w in state.works),
                "wall_ns": time.perf_counter_ns() - t0,
            })
            if float(np.sum(np.abs(resid))) <= sigma:
                if viol <= config.sigma_star and delta <= config.omega_star:
                    round_converged = True
                    round_done = True
                else:
                    state.lam = state.lam + state.mu_pen * resid
                    sigma /= state.mu_pen ** 0.9
                    omega /= state.mu_pen
            else:
                state.mu_pen *= 2.0
                sigma = state.mu_pen ** -0.1
                omega = 1.0 / state.mu_pen
            if metric < best_metric - 1e-12:
                best_metric, stall = metric, 0
            else:
                stall += 1
                if stall >= config.patience:
                    round_done = True
            if state.total_inner_epochs >= config.max_inner:
                out_of_budget = not round_converged
                round_done = True
        converged = round_converged
        if out_of_budget or stall >= config.patience or \
                outer == config.max_outer - 1:
            break
        # next round: halve the relaxation, keep penalty and multipliers,
        # re-center the slacks at the AL's exact minimizer over s >= 0
        state.iota *= 0.5
        c, _ = _residual_pass(state, samples, config)
        state.s = np.maximum(-c - state.lam / state.mu_pen, 0.0)

    learned = model.replace_weights(state.w_sy)
    if config.head is not None and state.w_nn is not None:
        config.head.w = state.w_nn.copy()
    return LearnResult(w_sy=state.w_sy, w_nn=state.w_nn, history=history,
                       converged=converged, model=learned, state=state)


def fit_value_loss(model: GroundedModel, samples, config: LearnConfig):
    """Plain descent on the energy or structured-perceptron loss: full-batch
    gradients, mirror descent on w_sy, adaptive moments on the head, with
    movement and patience stopping."""
    model.validate()
    samples = list(samples)
    if not samples:
        raise LearnError("no training samples")
    if config.loss not in ("energy", "sp"):
        raise LearnError("fit_value_loss is for the value losses")
    state = init_state(model, samples, config)
    n = len(samples)
    history = []
    t0 = time.perf_counter_ns()
    best = np.inf
    best_w = state.w_sy.copy()
    best_wn = None if state.w_nn is None else state.w_nn.copy()
    stall = 0
    converged = False
    for _epoch in range(config.max_inner):
        model_w = state.works[0].model_ref.replace_weights(state.w_sy)
        snap = state.params_snapshot()
        total = 0.0
        gw = np.zeros_like(state.w_sy)
        gwn = None if state.w_nn is None else np.zeros_like(state.w_nn)
        for i, sample in enumerate(samples):
            work = state.works[i]
            g = _resolve_slots(sample, config.head, state.w_nn)
            lat = work.infer(model_w, "latent", config.inference, g)
            if config.loss == "energy":
                total += lat.value
                gw += lat.phi
                if gwn is not None:
                    u = L.slot_cotangent(work.lcqp_latent, lat.mu)
                    gwn += neural.vjp(config.head, sample.x_nn, u,
                                      w=state.w_nn)
            else:
                full = work.infer(model_w, "full", config.inference, g)
                total += lat.value - full.value
                gw += lat.phi - full.phi
                if gwn is not None:
                    u = (L.slot_cotangent(work.lcqp_latent, lat.mu)
                         - L.slot_cotangent(work.lcqp_full, full.mu))
                    gwn += neural.vjp(config.head, sample.x_nn, u,
                                      w=state.w_nn)
        if config.neg_log_reg > 0.0:
            total += config.neg_log_reg * float(-np.log(state.w_sy).sum())
            gw -= config.neg_log_reg / state.w_sy
        state.w_sy = mirror_descent_step(state.w_sy, gw, config.step_w_sy)
        if state.w_nn is not None:
            state.w_nn, state.adam = adaptive_moment_step(
                state.w_nn, gwn / n, state.adam, step=config.step_w_nn)
        state.total_inner_epochs += 1
        history.append({
            "epoch": state.total_inner_epochs,
            "loss": total / n,
            "constraint_violation_max": 0.0,
            "iota": 0.0,
            "mu_pen": 0.0,
            "inference_epochs_total":
                sum(w.inference_epochs for w in state.works),
            "wall_ns": time.perf_counter_ns() - t0,
        })
        if total / n < best - 1e-12:
            best, stall = total / n, 0
            best_w = snap[0].copy()   # weights the loss was evaluated at
            if state.w_nn is not None:
                best_wn = snap[1].copy()
        else:
            stall += 1
            if stall >= config.patience:
                converged = True
                break
        if state.movement(snap) < config.movement_tol:
            converged = True
            break
    # hand back the best weights seen, not wherever the last step landed
    state.w_sy = best_w
    if state.w_nn is not None:
        state.w_nn = best_wn
    learned = model.replace_weights(state.w_sy)
    if config.head is not None and state.w_nn is not None:
        config.head.w = state.w_nn.copy()
    return LearnResult(w_sy=state.w_sy, w_nn=state.w_nn, history=history,
                       converged=converged, model=learned, state=state)


def learn(model: GroundedModel, samples, config: LearnConfig | None = None):
    """Dispatch on the configured loss: supervised losses run the bilevel
    outer loop, value losses run plain descent."""
    config = config or LearnConfig()
    if config.loss in ("mse", "bce"):
        return outer_loop(model, samples, config)
    return fit_value_loss(model, samples, config)
