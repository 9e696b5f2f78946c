"""Dual block coordinate descent: steps, certificates and variants."""
import numpy as np
import pytest

from hlmrf import (GroundedModel, HardConstraint, HingePotential,
                   SolverConfig, compile_model, connected_components,
                   primal_dual_gap, solve, solve_cc_parallel, solve_lock_free)
from hlmrf import lcqp as L
from hlmrf import solver
from hlmrf.oracle import active_set_oracle, random_model
from hlmrf.synth import chain, many_components

TIGHT = SolverConfig(delta=1e-8, max_epochs=50000)


def test_blocks_cover_every_row():
    for seed in range(5):
        lq = compile_model(random_model(seed), 0.1)
        blocks = solver.make_blocks(lq)
        seen = np.zeros(lq.n_rows, dtype=int)
        for blk in blocks:
            seen[blk.rows] += 1
            ref_cols = np.unique(lq.A[blk.rows].indices)
            assert np.array_equal(blk.cols, ref_cols)
            assert blk.B.shape == (blk.rows.size, blk.cols.size)
        assert seen.min() >= 1


def test_every_step_descends():
    for seed in range(12):
        lq = compile_model(random_model(seed), 0.1 if seed % 2 else 1.0)
        res = solve(lq, config=SolverConfig(delta=1e-6, max_epochs=2000,
                                            seed=seed), record_h=True)
        worst = max((after - before for before, after in res.stats.h_trace),
                    default=0.0)
        assert worst <= 1e-12


def test_exact_line_search_minimizes_along_direction():
    lq = compile_model(random_model(9), 0.1)
    b, state = solver._init_state(lq, None, None)
    blocks = solver.make_blocks(lq)
    checked = 0
    for _ in range(4):
        for blk in blocks:
            alpha, d, f, binding = solver._step_direction(state, blk)
            if alpha > 0.0 and binding is None:
                # interior step: h along the ray is minimized at alpha
                def h_at(a):
                    mu = state.mu.copy()
                    mu[blk.rows] -= a * d
                    return L.dual_objective(lq, mu)
                h_star = h_at(alpha)
                assert h_star <= h_at(alpha * 0.999) + 1e-12
                assert h_star <= h_at(alpha * 1.001) + 1e-12
                checked += 1
            solver.bcd_block_step(state, blk)
    assert checked >= 3


def test_boundary_never_deadlocks():
    # mu starts at 0; coordinates pinned at the wall with outward gradient
    # must not freeze the whole block
    lq = compile_model(random_model(0), 0.1)
    res = solve(lq, config=SolverConfig(delta=1e-6, max_epochs=5000))
    assert res.stats.converged
    assert res.stats.improving_steps > 0
    assert res.mu.min() >= 0.0


def test_final_gap_matches_fresh_recomputation():
    for seed in (1, 4, 8):
        lq = compile_model(random_model(seed), 0.1)
        res = solve(lq, config=SolverConfig(delta=1e-6, max_epochs=20000,
                                            seed=seed))
        gap, nu_f = primal_dual_gap(lq, res.mu)
        assert res.stats.final_gap == pytest.approx(gap, abs=1e-9)
        assert np.allclose(res.nu, nu_f, atol=1e-9)
        assert res.objective == pytest.approx(
            L.primal_objective(lq, res.nu), rel=1e-12)


def test_certificate_holds_at_termination():
    for seed in range(6):
        model = random_model(seed, n_con=2)
        lq = compile_model(model, 0.1)
        res = solve(lq, config=SolverConfig(delta=1e-6, max_epochs=50000,
                                            seed=seed))
        assert res.stats.converged
        assert res.stats.final_gap <= 1e-6
        resid = lq.A @ res.nu + lq.b_base
        assert float(resid.max(initial=0.0)) <= 1e-6


def test_warm_start_at_oracle_optimum_terminates_immediately():
    lq = compile_model(random_model(3), 0.1)
    sol = active_set_oracle(lq)
    res = solve(lq, config=SolverConfig(delta=1e-6, max_epochs=100),
                warm_start=sol.mu)
    assert res.stats.epochs == 1
    assert res.stats.final_gap <= 1e-9
    assert res.objective == pytest.approx(sol.objective, abs=1e-9)


def test_warm_start_validation():
    lq = compile_model(random_model(3), 0.1)
    with pytest.raises(L.LCQPError):
        solve(lq, warm_start=np.zeros(lq.n_rows + 1))
    with pytest.raises(L.LCQPError):
        solve(lq, warm_start=np.full(lq.n_rows, -1.0))


def test_movement_stop_mode():
    model, _, _ = chain(0, n=20)
    lq = compile_model(model, 0.1)
    res = solve(lq, config=SolverConfig(stop_mode="primal_movement",
                                        movement_tol=1e-3, max_epochs=5000))
    assert res.stats.converged
    assert res.stats.epochs >= 2


def test_component_separability():
    # disjoint components: the full optimum is the concatenation of the
    # per-component optima and objectives add up
    model, _, _ = many_components(2, k=4)
    lq = compile_model(model, 0.1)
    full = solve(lq, config=TIGHT)
    comps = connected_components(model)
    pot_by, con_by, extra = solver._component_membership(model, comps)
    assert not extra
    total = 0.0
    for cid, comp in enumerate(comps):
        sub = solver.split_model(model, comp, pot_by[cid], con_by[cid])
        sub_lq = compile_model(sub, 0.1)
        total += solve(sub_lq, config=TIGHT).objective
    assert total == pytest.approx(full.objective, abs=1e-7)


def test_cc_matches_manual_per_component_solves_bitwise():
    model, _, _ = many_components(5, k=6)
    config = SolverConfig(delta=1e-6, max_epochs=20000, seed=11)
    lq = compile_model(model, 0.1)
    res = solve_cc_parallel(model, config=config, full_lcqp=lq, workers=4)
    assert res.stats.converged

    comps = connected_components(model)
    pot_by, con_by, extra = solver._component_membership(model, comps)
    mu_ref = np.zeros(lq.n_rows)
    nu_ref = np.zeros(lq.n_cols)
    for cid, comp in enumerate(comps):
        sub = solver.split_model(model, comp, pot_by[cid], con_by[cid])
        sub_lq = compile_model(sub, 0.1)
        sub_res = solve(sub_lq, config=config,
                        seed_seq=solver.component_seed(config.seed, cid))
        row_map, col_map = solver._sub_maps(lq, sub_lq, comp,
                                            pot_by[cid], con_by[cid])
        mu_ref[row_map] = sub_res.mu
        nu_ref[col_map] = sub_res.nu
    assert np.array_equal(res.mu, mu_ref)
    assert np.array_equal(res.nu, nu_ref)


def test_cc_worker_count_does_not_change_the_result():
    model, _, _ = many_components(7, k=8)
    config = SolverConfig(delta=1e-6, max_epochs=20000, seed=3)
    outs = [solve_cc_parallel(model, config=config, workers=w)
            for w in (1, 2, 8)]
    for other in outs[1:]:
        assert np.array_equal(outs[0].mu, other.mu)
        assert np.array_equal(outs[0].nu, other.nu)
    assert len(outs[0].stats.per_component) == 8


def test_component_seed_is_deterministic():
    a = solver.component_seed(13, 2).generate_state(4)
    b = solver.component_seed(13, 2).generate_state(4)
    c = solver.component_seed(13, 3).generate_state(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_split_model_remaps_indices():
    model, _, _ = many_components(1, k=3)
    comps = connected_components(model)
    pot_by, con_by, _ = solver._component_membership(model, comps)
    sub = solver.split_model(model, comps[1], pot_by[1], con_by[1])
    sub.validate()
    assert sub.n_y == comps[1].size
    for pot in sub.potentials:
        assert all(0 <= j < sub.n_y for j in pot.y)
    assert sub.w_sy is model.w_sy


def test_lock_free_certificate_and_agreement():
    model, _, _ = chain(4, n=30)
    lq = compile_model(model, 0.1)
    serial = solve(lq, config=SolverConfig(delta=1e-6, max_epochs=20000))
    for workers in (1, 4):
        res = solve_lock_free(lq, config=SolverConfig(
            delta=1e-6, max_epochs=20000, workers=workers))
        assert res.stats.converged
        assert res.stats.final_gap <= 1e-6
        resid = lq.A @ res.nu + lq.b_base
        assert float(resid.max(initial=0.0)) <= 1e-6
        rel = abs(res.objective - serial.objective) / max(
            abs(serial.objective), 1e-9)
        assert rel <= 1e-3


def test_lock_free_respects_hard_constraints():
    model, _, _ = many_components(9, k=4)
    lq = compile_model(model, 0.1)
    res = solve_lock_free(lq, config=SolverConfig(delta=1e-6,
                                                  max_epochs=20000,
                                                  workers=4))
    assert res.stats.converged
    resid = lq.A @ res.nu + lq.b_base
    assert float(resid[:lq.q].max(initial=0.0)) <= 1e-6


def test_infeasible_model_never_certifies():
    # y0 >= 0.8 and y0 <= 0.2 cannot both hold; the dual diverges and the
    # gap stop must not fire because the hard rows stay violated
    model = GroundedModel(
        n_y=1, x_sy=np.zeros(0), n_g=0, r=1, w_sy=np.array([1.0]),
        potentials=[HingePotential(y={0: 1.0}, b=0.0, p=2, partition=0)],
        constraints=[HardConstraint(y={0: -1.0}, b=0.8),
                     HardConstraint(y={0: 1.0}, b=-0.2)])
    model.validate()
    lq = compile_model(model, 0.1)
    try:
        res = solve(lq, config=SolverConfig(delta=1e-6, max_epochs=500))
    except solver.InfeasibleModelError:
        return
    assert not res.stats.converged
    resid = lq.A @ res.nu + lq.b_base
    assert float(resid[:lq.q].max(initial=0.0)) > 1e-6


def test_budget_exit_reports_not_converged():
    model, _, _ = chain(0, n=40)
    lq = compile_model(model, 0.1)
    res = solve(lq, config=SolverConfig(delta=1e-12, max_epochs=2))
    assert not res.stats.converged
    assert res.stats.epochs == 2


def test_dual_value_is_monotone_across_epochs():
    # the recorded h trace is per-step; epoch boundaries inherit monotone
    # nonincreasing h, so the certified dual value never regresses
    lq = compile_model(random_model(5, n_con=2), 0.1)
    res = solve(lq, config=SolverConfig(delta=1e-8, max_epochs=5000),
                record_h=True)
    hs = [before for before, _ in res.stats.h_trace]
    hs.append(res.stats.h_trace[-1][1])
    diffs = np.diff(np.asarray(hs))
    assert diffs.max(initial=0.0) <= 1e-12
