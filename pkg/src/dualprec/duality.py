"""Uplink-downlink duality: beta scalars, D and Psi matrices, the power
transform, and the end-to-end theorem check.

With uplink MMSE receivers u_l at powers q, factor u_l = q_l^{-1/2}
beta_l ubar_l with beta_l = sqrt(q_l) ||u_l|| and unit ubar_l.  The
per-stream MSEs eps then satisfy two linear systems over the active
streams (E = diag(eps), B2 = diag(beta^2)):

    downlink:  (E - D - B2 Psi)   p = sigma2 beta^2
    uplink:    (E - D - B2 Psi^T) q = sigma2 beta^2

where Psi_ij = |htil_i^H ubar_j|^2 off the diagonal.  Psi = Psi^T makes
the two systems coincide, which is exactly what holds at a
KKT-certified power allocation; then p = q and the downlink conversion
is a plain copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (InfeasibleTransformError, NumericsError,
                     SingularTransformError)
from .model import (DOWNLINK, ChannelSet, EffectiveChannel, PrecoderSet,
                    ReceiverSet, build_effective_channel)
from .objective import (grad_trace_Jinv, make_state, mmse_receivers_uplink,
                        mmse_report_downlink, mmse_report_uplink)
from .solver import SolverConfig, active_set

#: Condition number above which the transform matrix is rejected rather
#: than solved; a near-singular transform means the MSE tuple is bogus,
#: not that regularization is wanted.
COND_LIMIT = 1e12


@dataclass(frozen=True)
class DualityData:
    """Active-stream duality quantities.

    ``D`` holds the diagonal entries of the paper-level diagonal matrix;
    ``Psi`` is the L_A x L_A coupling matrix with an exactly zero
    diagonal; ``downlink_dirs`` are the normalized receivers (M x L_A)
    that become downlink beamformers.
    """

    beta: np.ndarray
    D: np.ndarray
    Psi: np.ndarray
    eps: np.ndarray
    active: np.ndarray
    downlink_dirs: np.ndarray
    n_streams: int


@dataclass(frozen=True)
class DualityReport:
    """Measured theorem quantities for one instance.

    ``mse_gap`` compares the uplink MSEs against the downlink MSEs
    achieved by the duality-factored receivers (the receivers the
    transform is built around; equality is the theorem's claim).
    ``mse_gap_mmse`` uses downlink MMSE receivers instead, which can only
    improve on the factored ones, so it is one-sided and generally
    nonzero for arbitrary uplink precoders.
    """

    p: np.ndarray
    q: np.ndarray
    psi_asymmetry: float
    pq_gap: float
    mse_gap: float
    sum_power_dl: float
    mse_gap_mmse: float = 0.0


def psi_asymmetry(Psi: np.ndarray) -> float:
    """max |Psi - Psi^T| normalized by max(1, max |Psi|)."""
    if Psi.shape[0] <= 1:
        return 0.0
    return float(np.abs(Psi - Psi.T).max() / max(1.0, np.abs(Psi).max()))


def build_duality_data(eff: EffectiveChannel, sigma2: float, q,
                       receivers: ReceiverSet, eps,
                       active_tol: float = 0.0) -> DualityData:
    """Assemble beta, D, Psi on the active streams.

    ``receivers`` must be the uplink MMSE receivers for (eff, q) and
    ``eps`` the matching per-stream MSEs.  Inactive rows and columns are
    deleted; the caller re-inserts zeros afterwards.
    """
    q = np.asarray(q, dtype=float)
    eps = np.asarray(eps, dtype=float)
    act, _ = active_set(q, active_tol)
    if act.size == 0:
        raise NumericsError("no active streams to transform")
    U = receivers.stacked()
    u_act = U[:, act]
    norms = np.linalg.norm(u_act, axis=0)
    if np.any(norms == 0.0):
        raise NumericsError("zero MMSE receiver on an active stream")
    beta = np.sqrt(q[act]) * norms
    dirs = u_act / norms
    h_act = eff.cols[:, act]
    s = np.einsum("ml,ml->l", h_act.conj(), dirs)  # htil_l^H ubar_l
    D = np.abs(beta * s) ** 2 - 2.0 * beta * s.real + 1.0
    C = h_act.conj().T @ dirs                      # C_ij = htil_i^H ubar_j
    Psi = np.abs(C) ** 2
    np.fill_diagonal(Psi, 0.0)
    return DualityData(beta=beta, D=D, Psi=Psi, eps=eps[act], active=act,
                       downlink_dirs=dirs, n_streams=q.size)


def _solve_transform(dd: DualityData, sigma2: float,
                     coupling: np.ndarray) -> np.ndarray:
    A = np.diag(dd.eps - dd.D) - dd.beta[:, None] ** 2 * coupling
    if np.linalg.cond(A) > COND_LIMIT:
        raise SingularTransformError(
            "power-transform matrix condition number exceeds 1e12")
    x = np.linalg.solve(A, sigma2 * dd.beta ** 2)
    if np.any(x < -1e-9):
        raise InfeasibleTransformError(
            "transform produced a negative power; the MSE tuple is not "
            "achievable")
    out = np.zeros(dd.n_streams)
    out[dd.active] = np.maximum(x, 0.0)
    return out


def transform_power(dd: DualityData, sigma2: float) -> np.ndarray:
    """Downlink powers achieving the per-stream MSEs in ``dd``.

    Solves the coupling system with Psi; inactive streams get exactly
    zero power.
    """
    return _solve_transform(dd, sigma2, dd.Psi)


def transform_power_uplink(dd: DualityData, sigma2: float) -> np.ndarray:
    """Reconstruct the uplink powers from (eps, D, beta, Psi).

    Uses the transposed coupling; round-trips the q that produced ``dd``
    exactly (up to the linear solve), optimal or not.
    """
    return _solve_transform(dd, sigma2, dd.Psi.T)


def check_equal_gradient_condition(eff: EffectiveChannel, sigma2: float, q,
                                   active_tol: float = 0.0) -> float:
    """Spread (max - min, normalized by the mean) of htil_l^H J^-2 htil_l
    over active streams; ~0 exactly when the symmetry condition holds."""
    q = np.asarray(q, dtype=float)
    act, _ = active_set(q, active_tol)
    if act.size <= 1:
        return 0.0
    gains = -grad_trace_Jinv(make_state(eff, q, sigma2))[act]
    return float((gains.max() - gains.min()) / gains.mean())


def verify_theorem(ch: ChannelSet, uplink: PrecoderSet, q,
                   cfg: SolverConfig | None = None) -> DualityReport:
    """End-to-end theorem check at one power allocation.

    Builds the uplink MMSE operating point, converts it to the downlink
    via the transform, evaluates the downlink MSEs, and reports the
    asymmetry of Psi together with the p-q and MSE gaps.  Meaningful
    bounds hold only when q carries a passing KKT certificate; feeding a
    non-optimal q is how the negative control is produced.
    """
    if cfg is None:
        cfg = SolverConfig()
    q = np.asarray(q, dtype=float)
    eff = build_effective_channel(ch, uplink)
    state = make_state(eff, q, ch.sigma2)
    receivers = mmse_receivers_uplink(state)
    rep_ul = mmse_report_uplink(state)
    dd = build_duality_data(eff, ch.sigma2, q, receivers, rep_ul.per_stream,
                            active_tol=cfg.active_tol_scale * ch.p_max)
    p = transform_power(dd, ch.sigma2)

    dl = _downlink_precoders(ch, eff, state, dd, p)
    rep_dl = mmse_report_downlink(ch, dl)

    eps_dl = _factored_downlink_mse(ch, uplink, dl, dd)
    gap_pq = float(np.abs(p - q).max() / max(1.0, ch.p_max))
    gap_mse = float(np.abs(eps_dl - rep_ul.per_stream).max())
    gap_mmse = float(np.abs(rep_dl.per_stream - rep_ul.per_stream).max())
    return DualityReport(p=p, q=q, psi_asymmetry=psi_asymmetry(dd.Psi),
                         pq_gap=gap_pq, mse_gap=gap_mse,
                         sum_power_dl=float(p.sum()), mse_gap_mmse=gap_mmse)


def _factored_downlink_mse(ch: ChannelSet, uplink: PrecoderSet,
                           dl: PrecoderSet, dd: DualityData) -> np.ndarray:
    """Downlink per-stream MSEs under the duality-factored receivers
    v_l = beta_l p_l^{-1/2} vbar_l, computed directly from the channel
    model (signal, cross-stream, and noise terms summed explicitly).

    Zero-power streams carry a zero receiver and an MSE of exactly 1.
    Not exported: arbitrary-receiver downlink evaluation stays internal.
    """
    d = ch.dims
    p = dl.powers
    Ubar = dl.stacked()
    sp = np.sqrt(p)
    eps = np.ones(d.L_tot)
    owner = d.stream_owner()
    for pos, l in enumerate(dd.active):
        if p[l] == 0.0:
            continue  # infeasible tuple; the zero receiver leaves MSE 1
        k = int(owner[l])
        vbar_l = uplink.by_user[k][:, l - sum(d.L[:k])]
        v = (dd.beta[pos] / np.sqrt(p[l])) * vbar_l
        coef = sp * (v.conj() @ (ch.H[k].conj().T @ Ubar))
        m = abs(coef[l] - 1.0) ** 2
        m += float(np.sum(np.abs(np.delete(coef, l)) ** 2))
        m += ch.sigma2 * float(np.linalg.norm(v) ** 2)
        eps[l] = float(np.real(m))
    return eps


def _downlink_precoders(ch, eff, state, dd, p) -> PrecoderSet:
    """Downlink beamformer set: normalized MMSE receivers on active
    streams, an arbitrary unit direction on zero-power streams (their MSE
    is 1 regardless)."""
    M = eff.M
    dirs = np.zeros((M, eff.L_tot), dtype=complex)
    dirs[:, dd.active] = dd.downlink_dirs
    is_active = np.zeros(eff.L_tot, dtype=bool)
    is_active[dd.active] = True
    for l in np.flatnonzero(~is_active):
        v = state.Jinv_cols[:, l]
        n = np.linalg.norm(v)
        if n > 0:
            dirs[:, l] = v / n
        else:
            dirs[0, l] = 1.0
    d = ch.dims
    by_user = tuple(dirs[:, d.user_streams(k)] for k in range(d.K))
    return PrecoderSet(direction=DOWNLINK, by_user=by_user, powers=p)
