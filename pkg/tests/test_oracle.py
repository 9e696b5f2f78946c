"""Active-set enumeration oracle: hand values, KKT certificates, limits."""
import numpy as np
import pytest

from hlmrf import (GroundedModel, HingePotential, OracleError, SolverConfig,
                   active_set_oracle, compile_model, projected_subgradient,
                   solve)
from hlmrf import lcqp as L
from hlmrf.oracle import MAX_ORACLE_ROWS, random_model


def single_squared_model():
    # (max(0.7 - y, 0))^2 with weight 2.0
    return GroundedModel(
        n_y=1, x_sy=np.zeros(0), n_g=0, r=1, w_sy=np.array([2.0]),
        potentials=[HingePotential(y={0: -1.0}, b=0.7, p=2, partition=0)],
        constraints=[])


def test_hand_computed_single_potential_optimum():
    # minimize (w + eps) s^2 + eps y^2 with s >= 0.7 - y:
    # y* = 0.7 (w + eps) / (w + 2 eps), slack tight
    lq = compile_model(single_squared_model(), 0.1)
    sol = active_set_oracle(lq)
    y_star = 0.7 * 2.1 / 2.2
    obj_star = 2.1 * (0.7 - y_star) ** 2 + 0.1 * y_star ** 2
    assert obj_star == pytest.approx(0.04677272727272727, abs=1e-15)
    assert sol.nu[-1] == pytest.approx(y_star, abs=1e-12)
    assert sol.objective == pytest.approx(obj_star, abs=1e-12)
    assert sol.dual_value == pytest.approx(obj_star, abs=1e-10)
    res = solve(lq, config=SolverConfig(delta=1e-10, max_epochs=20000))
    assert res.objective == pytest.approx(obj_star, abs=1e-9)
    assert res.nu[-1] == pytest.approx(y_star, abs=1e-6)


def test_oracle_solutions_satisfy_kkt():
    for seed in range(20):
        eps = 0.1 if seed % 2 == 0 else 1.0
        lq = compile_model(random_model(seed), eps)
        sol = active_set_oracle(lq)
        assert sol.mu.min() >= -1e-9
        A = lq.A.toarray()
        dt = 1.0 / (lq.D_diag + eps)
        u = A @ (dt * lq.c)
        scale = 1.0 + float(np.abs(2.0 * lq.b_base - u).max())
        # primal feasibility of the recovered point
        resid = lq.A @ sol.nu + lq.b_base
        assert float(resid.max(initial=0.0)) <= 1e-6 * scale
        # strong duality
        assert abs(sol.objective - sol.dual_value) <= \
            1e-6 * (1.0 + abs(sol.objective))
        # dual stationarity on and off the active set
        grad = 0.5 * (A @ (dt * (A.T @ sol.mu))) + 0.5 * u - lq.b_base
        active = sol.active_set
        if active.size:
            assert float(np.abs(grad[active]).max()) <= 1e-6 * scale
        assert float(grad.min(initial=0.0)) >= -1e-6 * scale
        assert sol.candidates_tried >= 1


def test_unique_dual_flag_matches_rank_of_active_rows():
    for seed in range(12):
        lq = compile_model(random_model(seed), 0.1)
        sol = active_set_oracle(lq)
        if sol.active_set.size:
            rank = np.linalg.matrix_rank(lq.A[sol.active_set].toarray())
            assert sol.unique_dual == (rank == sol.active_set.size)
        else:
            assert sol.unique_dual


def test_oracle_agrees_with_bcd_on_random_suite():
    config = SolverConfig(delta=1e-6, max_epochs=50000)
    for seed in range(10):
        lq = compile_model(random_model(seed), 0.1)
        sol = active_set_oracle(lq)
        res = solve(lq, config=config)
        rel = abs(res.objective - sol.objective) / (1.0 + abs(sol.objective))
        assert rel <= 1e-4
        ydiff = np.abs(res.nu[lq.target_slice] - sol.nu[lq.target_slice])
        # strong convexity bounds the primal error by the certificate radius
        assert float(ydiff.max(initial=0.0)) <= (1e-6 / lq.epsilon) ** 0.5


def test_projected_subgradient_cross_check():
    lq = compile_model(single_squared_model(), 0.1)
    sol = active_set_oracle(lq)
    nu = projected_subgradient(lq, steps=30000, step_size=1e-3)
    assert abs(nu[-1] - sol.nu[-1]) <= 1e-2
    model = random_model(2, n_con=0)
    lq = compile_model(model, 1.0)
    sol = active_set_oracle(lq)
    nu = projected_subgradient(lq, steps=30000, step_size=1e-3)
    ydiff = np.abs(nu[lq.target_slice] - sol.nu[lq.target_slice])
    assert float(ydiff.max()) <= 2e-2


def test_oracle_rejects_oversized_problems():
    model = random_model(0, n_y=12, n_pot=10, n_con=2)
    lq = compile_model(model, 0.1)
    assert lq.n_rows > MAX_ORACLE_ROWS
    with pytest.raises(OracleError):
        active_set_oracle(lq)


def test_oracle_budget_exhaustion_raises():
    lq = compile_model(random_model(1), 0.1)
    with pytest.raises(OracleError):
        active_set_oracle(lq, budget=1)
