import numpy as np
import pytest

from conftest import DIMS_2x2
from dualprec import (BOTH, LEGACY, SIMPLIFIED, ChannelSet, ConvergenceError,
                      DesignConfig, RankError, SystemDims, ValidationError,
                      compare_paths, design, gen_channel, normalize_covariance)


def small_channel(seed=11):
    return gen_channel(DIMS_2x2, 1.0, 10.0, seed=seed)


# ---------------------------------------------------------------------------
# design loop

def test_scalar_design_closed_form():
    dims = SystemDims(M=1, K=1, N=(1,), L=(1,))
    ch = ChannelSet(dims=dims, H=(np.array([[1.0 + 0j]]),), sigma2=1.0,
                    p_max=5.0)
    res = design(ch, DesignConfig(seed=1))
    assert res.iters <= 2
    assert res.uplink.powers[0] == pytest.approx(5.0, abs=1e-12)
    assert res.downlink.powers[0] == pytest.approx(5.0, abs=1e-12)
    assert res.smse_trace[-1] == pytest.approx(1.0 / 6.0, abs=1e-12)


def test_diagonal_channel_aligns_and_splits():
    dims = SystemDims(M=2, K=2, N=(1, 1), L=(1, 1))
    H1 = np.array([[1.0], [0.0]], dtype=complex)
    H2 = np.array([[0.0], [1.0]], dtype=complex)
    ch = ChannelSet(dims=dims, H=(H1, H2), sigma2=1.0, p_max=4.0)
    res = design(ch, DesignConfig(seed=2))
    assert np.allclose(res.uplink.powers, [2.0, 2.0], atol=1e-8)
    assert np.allclose(res.downlink.powers, [2.0, 2.0], atol=1e-8)
    ub = res.downlink.stacked()
    assert abs(ub[0, 0]) == pytest.approx(1.0, abs=1e-10)
    assert abs(ub[1, 1]) == pytest.approx(1.0, abs=1e-10)


def test_path_agreement_every_iteration():
    res = design(small_channel(), DesignConfig(path=BOTH, seed=11))
    assert len(res.path_gap_trace) == res.iters
    assert max(res.path_gap_trace) <= 1e-6 * 10.0


def test_monotone_descent():
    for seed in (3, 4, 5):
        res = design(small_channel(seed), DesignConfig(seed=seed))
        tr = np.array(res.smse_trace)
        assert np.all(np.diff(tr) <= 1e-10)


def test_trace_floor():
    res = design(small_channel(6), DesignConfig(seed=6))
    d = DIMS_2x2
    assert res.smse_trace[-1] >= max(0, d.L_tot - d.M) - 1e-10
    assert res.smse_trace[-1] > 0


def test_fixed_point_rerun():
    ch = small_channel(7)
    res = design(ch, DesignConfig(seed=7))
    # restart from the converged beamformers: the trace must not move
    cfg2 = DesignConfig(seed=7)
    res2 = design_from(ch, res.uplink, cfg2)
    rel = abs(res2.smse_trace[-1] - res.smse_trace[-1]) / res.smse_trace[-1]
    assert rel <= cfg2.smse_rel_tol


def design_from(ch, uplink_set, cfg):
    """Re-run the alternation seeded with given uplink beamformers."""
    import dualprec.designer as dz

    orig = dz._init_uplink_dirs
    dz._init_uplink_dirs = lambda c, f: [b.copy() for b in uplink_set.by_user]
    try:
        return dz.design(ch, cfg)
    finally:
        dz._init_uplink_dirs = orig


def test_convergence_error_carries_partial():
    with pytest.raises(ConvergenceError) as ei:
        design(small_channel(8), DesignConfig(max_outer_iters=1, seed=8))
    partial = ei.value.partial
    assert partial is not None
    assert partial.iters == 1 and not partial.converged


def test_channel_svd_init():
    res = design(small_channel(9), DesignConfig(init_mode="channel_svd"))
    assert res.converged
    tr = np.array(res.smse_trace)
    assert np.all(np.diff(tr) <= 1e-10)


def test_legacy_only_path():
    res = design(small_channel(10), DesignConfig(path=LEGACY, seed=10))
    assert res.converged
    assert res.shortcut_time == 0.0 and res.transform_time > 0.0
    assert abs(res.downlink.powers.sum() - res.uplink.powers.sum()) <= 1e-6


def test_design_rejects_invalid_instance():
    ch = small_channel(1)
    bad = ChannelSet(dims=ch.dims, H=ch.H, sigma2=-1.0, p_max=ch.p_max)
    with pytest.raises(ValidationError):
        design(bad, DesignConfig())
    with pytest.raises(ValidationError):
        DesignConfig(path="nope")


# ---------------------------------------------------------------------------
# compare_paths

def test_compare_paths_agreement_and_timing():
    cfg = DesignConfig(path=BOTH, seed=20)
    cp = compare_paths(small_channel(20), cfg)
    assert cp.max_power_discrepancy <= 1e-6 * 10.0
    assert cp.final_smse_difference <= 1e-8
    assert cp.t_shortcut_median < cp.t_legacy_median


def test_compare_paths_requires_both():
    with pytest.raises(ValidationError):
        compare_paths(small_channel(21), DesignConfig(path=SIMPLIFIED))


def test_compare_paths_aggregate_timing():
    tot_leg = tot_sc = 0.0
    for seed in range(10):
        cp = compare_paths(small_channel(seed),
                           DesignConfig(path=BOTH, seed=seed))
        tot_leg += cp.t_legacy_total
        tot_sc += cp.t_shortcut_total
    assert tot_sc < tot_leg


def test_single_stream_instance_conversion_exact():
    dims = SystemDims(M=2, K=1, N=(2,), L=(1,))
    ch = gen_channel(dims, 1.0, 3.0, seed=30)
    cp = compare_paths(ch, DesignConfig(path=BOTH, seed=30))
    assert cp.max_power_discrepancy <= 1e-12


# ---------------------------------------------------------------------------
# normalize_covariance

def test_normalize_scaled_projector():
    e1 = np.zeros((3, 1), dtype=complex)
    e1[0] = 1.0
    (q, Rbar), = normalize_covariance([2.0 * (e1 @ e1.conj().T)])
    assert q == pytest.approx(2.0, abs=1e-15)
    assert np.allclose(Rbar, e1 @ e1.conj().T)
    assert np.trace(Rbar).real == pytest.approx(1.0, abs=1e-12)


def test_normalize_zero_matrix_inactive():
    (q, Rbar), = normalize_covariance([np.zeros((2, 2))])
    assert q == 0.0 and Rbar is None


def test_normalize_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(10):
        v = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        v /= np.linalg.norm(v)
        q0 = rng.uniform(0.1, 9.0)
        R = q0 * np.outer(v, v.conj())
        (q, Rbar), = normalize_covariance([R])
        assert abs(q - q0) <= 1e-12 * q0
        assert np.abs(Rbar - np.outer(v, v.conj())).max() <= 1e-12


def test_normalize_rejects_rank_two():
    R = np.diag([1.0, 0.5]).astype(complex)
    with pytest.raises(RankError):
        normalize_covariance([R])
