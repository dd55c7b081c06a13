import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rand_instance, scalar_instance
from dualprec import (ConvergenceError, CostGuardError, EffectiveChannel,
                      NumericsError, SolverConfig, SystemDims,
                      ValidationError, active_set, brute_force_power,
                      kkt_certify, project_power, solve_power)
from dualprec.solver import _trace_jinv, _value_gains


def eff_from_cols(cols):
    cols = np.asarray(cols, dtype=complex)
    return EffectiveChannel(cols=cols, stream_owner=np.zeros(cols.shape[1],
                                                             dtype=int))


def orthonormal_pair():
    return eff_from_cols(np.eye(2))


def collinear_weak(scale=0.1):
    h = np.array([1.0, 0.0])
    return eff_from_cols(np.stack([h, scale * h], axis=1))


# ---------------------------------------------------------------------------
# config and small utilities

def test_config_validation():
    with pytest.raises(ValidationError):
        SolverConfig(kkt_tol=0.0)
    with pytest.raises(ValidationError):
        SolverConfig(backtrack_ratio=1.0)
    with pytest.raises(ValidationError):
        SolverConfig(max_iters=0)


def test_active_set_examples():
    act, inact = active_set(np.array([1.0, 0.0, 2.0]), 1e-9)
    assert act.tolist() == [0, 2] and inact.tolist() == [1]
    act, inact = active_set(np.array([0.5, 0.5]), 1e-9)
    assert inact.size == 0
    with pytest.raises(ValidationError):
        active_set(np.array([-1.0]), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=-10, max_value=10), min_size=1,
                max_size=8),
       st.floats(min_value=0.1, max_value=20))
def test_project_power_properties(vals, p_max):
    q = np.array(vals)
    p = project_power(q, p_max)
    assert np.all(p >= 0)
    assert p.sum() <= p_max + 1e-9
    # projecting a feasible point is the identity
    assert np.allclose(project_power(p, p_max), p, atol=1e-12)


def test_project_power_simplex_case():
    p = project_power(np.array([2.0, 2.0]), 2.0)
    assert np.allclose(p, [1.0, 1.0])
    p = project_power(np.array([5.0, -1.0]), 2.0)
    assert np.allclose(p, [2.0, 0.0])


# ---------------------------------------------------------------------------
# solve_power

def test_single_stream_gets_full_budget():
    _, _, eff = scalar_instance()
    q, cert = solve_power(eff, 1.0, 3.0)
    assert q[0] == pytest.approx(3.0, abs=1e-12)
    assert cert.max_residual <= 1e-9


def test_orthonormal_pair_splits_evenly():
    q, cert = solve_power(orthonormal_pair(), 1.0, 2.0)
    assert np.allclose(q, [1.0, 1.0], atol=1e-9)
    assert cert.max_residual <= 1e-9


def test_collinear_weak_stream_deactivates():
    q, cert = solve_power(collinear_weak(), 1.0, 5.0)
    assert q[1] == 0.0
    assert q[0] == pytest.approx(5.0, abs=1e-9)
    act, inact = active_set(q, 1e-9 * 5.0)
    assert act.tolist() == [0] and inact.tolist() == [1]


def test_budget_tight_at_optimum():
    for seed in range(10):
        ch, _, eff = rand_instance(seed)
        q, cert = solve_power(eff, ch.sigma2, ch.p_max)
        assert abs(q.sum() - ch.p_max) <= 1e-9 * max(1.0, ch.p_max)
        assert cert.passes(1e-9)


def test_equal_gains_on_active_streams():
    for seed in range(10):
        ch, _, eff = rand_instance(seed)
        cfg = SolverConfig()
        q, cert = solve_power(eff, ch.sigma2, ch.p_max, cfg)
        _, gains, _ = _value_gains(eff.cols, ch.sigma2, q)
        act = q > 1e-9 * ch.p_max
        if act.sum() > 1:
            assert gains[act].max() - gains[act].min() <= 2 * cfg.kkt_tol
        assert np.all(gains[~act] <= cert.mu_sum + cfg.kkt_tol)


def test_descent_and_feasible_iterates():
    ch, _, eff = rand_instance(12)
    fs, qs = [], []
    solve_power(eff, ch.sigma2, ch.p_max,
                callback=lambda q, f: (qs.append(q.copy()), fs.append(f)))
    fs = np.array(fs)
    assert np.all(np.diff(fs) <= 1e-12)
    for q in qs:
        assert np.all(q >= 0) and q.sum() <= ch.p_max + 1e-9


def test_warm_start_matches_cold_objective():
    ch, _, eff = rand_instance(3)
    q_cold, _ = solve_power(eff, ch.sigma2, ch.p_max)
    q_warm, _ = solve_power(eff, ch.sigma2, ch.p_max,
                            q0=np.array([5.0, 5.0, 0.0, 0.0]))
    f_cold = _trace_jinv(eff.cols, ch.sigma2, q_cold)
    f_warm = _trace_jinv(eff.cols, ch.sigma2, q_warm)
    assert abs(f_cold - f_warm) <= 1e-10


def test_all_zero_channels_rejected():
    eff = eff_from_cols(np.zeros((2, 2)))
    with pytest.raises(NumericsError):
        solve_power(eff, 1.0, 1.0)


def test_convergence_error_carries_best_iterate():
    ch, _, eff = rand_instance(0)
    with pytest.raises(ConvergenceError) as ei:
        solve_power(eff, ch.sigma2, ch.p_max, SolverConfig(max_iters=1))
    e = ei.value
    assert e.best_q is not None and e.certificate is not None
    assert np.all(e.best_q >= 0)
    assert e.certificate.max_residual > 1e-9


# ---------------------------------------------------------------------------
# kkt_certify

def test_certify_solver_output():
    ch, _, eff = rand_instance(4)
    q, _ = solve_power(eff, ch.sigma2, ch.p_max)
    cert = kkt_certify(eff, ch.sigma2, ch.p_max, q)
    assert cert.max_residual <= 1e-9
    act = q > 1e-9 * ch.p_max
    assert np.all(cert.mu[act] == 0.0)
    assert np.all(cert.mu >= 0)


def test_certify_zero_point_flags_stationarity():
    ch, _, eff = rand_instance(4)
    cert = kkt_certify(eff, ch.sigma2, ch.p_max, np.zeros(4))
    assert cert.primal_sum_violation == 0.0
    assert cert.primal_nonneg_violation == 0.0
    assert cert.stationarity_residual > 0.0
    assert cert.slackness_residual == 0.0


def test_certify_residual_grows_linearly():
    ch, _, eff = rand_instance(7)
    q, _ = solve_power(eff, ch.sigma2, ch.p_max)
    act = np.flatnonzero(q > 1e-9 * ch.p_max)
    assert act.size >= 2
    d = np.zeros(4)
    d[act[0]], d[act[1]] = 1.0, -1.0

    def resid(delta):
        return kkt_certify(eff, ch.sigma2, ch.p_max,
                           q + delta * d).stationarity_residual

    r1, r2 = resid(1e-3), resid(2e-3)
    assert r1 > 0
    assert 1.5 <= r2 / r1 <= 2.6


# ---------------------------------------------------------------------------
# brute force oracle

def test_brute_force_single_stream():
    _, _, eff = scalar_instance()
    assert brute_force_power(eff, 1.0, 3.0, 11)[0] == 3.0


def test_brute_force_symmetric_split():
    q = brute_force_power(orthonormal_pair(), 1.0, 2.0, 201)
    assert np.allclose(q, [1.0, 1.0], atol=2.0 / 200)


def test_brute_force_cost_guard():
    _, _, eff = rand_instance(0)
    with pytest.raises(CostGuardError):
        brute_force_power(eff, 1.0, 1.0, 11)


def numeric_hessian_max_eig(eff, sigma2, q, h=1e-5):
    L = eff.L_tot
    H = np.zeros((L, L))
    for j in range(L):
        e = np.zeros(L)
        e[j] = h
        _, gp, _ = _value_gains(eff.cols, sigma2, np.maximum(q + e, 0))
        _, gm, _ = _value_gains(eff.cols, sigma2, np.maximum(q - e, 0))
        H[:, j] = -(gp - gm) / (2 * h)  # grad f = -gains
    return float(np.linalg.eigvalsh(0.5 * (H + H.T)).max())


def two_stream_instance(seed):
    dims = SystemDims(M=2, K=2, N=(1, 1), L=(1, 1))
    return rand_instance(seed, dims=dims, p_max=10.0)


def test_solver_matches_grid_oracle():
    grid_points = 2001
    for seed in range(10):
        ch, _, eff = two_stream_instance(seed)
        q, _ = solve_power(eff, ch.sigma2, ch.p_max)
        qg = brute_force_power(eff, ch.sigma2, ch.p_max, grid_points)
        f_solver = _trace_jinv(eff.cols, ch.sigma2, q)
        f_grid = _trace_jinv(eff.cols, ch.sigma2, qg)
        # the solver can only do better than the grid, up to residual noise
        assert f_solver <= f_grid + 1e-11
        # and the grid is within one cell's curvature of the optimum
        spacing = ch.p_max / (grid_points - 1)
        bound = numeric_hessian_max_eig(eff, ch.sigma2, q) * spacing ** 2
        assert f_grid - f_solver <= max(bound, 1e-12)


def test_brute_force_three_streams_runs():
    dims = SystemDims(M=2, K=3, N=(1, 1, 1), L=(1, 1, 1))
    ch, _, eff = rand_instance(5, dims=dims, p_max=3.0)
    q = brute_force_power(eff, ch.sigma2, ch.p_max, 31)
    assert q.shape == (3,)
    assert abs(q.sum() - 3.0) <= 1e-9


def test_duplicated_channels_still_certify():
    # exactly coincident streams make the optimum non-unique; any certified
    # point is acceptable and only objective values are compared
    h = np.array([0.8, -0.3 + 0.4j])
    eff = eff_from_cols(np.stack([h, h, 2 * h / 2], axis=1))
    q, cert = solve_power(eff, 1.0, 6.0)
    assert cert.passes(1e-9)
    assert abs(q.sum() - 6.0) <= 1e-9 * 6.0
    q2, cert2 = solve_power(eff, 1.0, 6.0, q0=np.array([6.0, 0.0, 0.0]))
    assert cert2.passes(1e-9)
    f1 = _trace_jinv(eff.cols, 1.0, q)
    f2 = _trace_jinv(eff.cols, 1.0, q2)
    assert abs(f1 - f2) <= 1e-10
