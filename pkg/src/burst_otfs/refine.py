"""Off-grid angle refinement and Doppler refinement by polynomial rooting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .model import DictionaryState, build_dictionary, shifted_pilots


def expected_sq_residual(U, Sigma, A, S, eps, Y) -> float:
    """``E ||Y - A G S^T||_F^2`` under independent Gaussian taps ``CN(U[:, n], Sigma[n])``."""
    R = Y - A @ U @ S.T
    AhA = A.conj().T @ A
    tr = np.real(Sigma.reshape(Sigma.shape[0], -1) @ AhA.T.ravel())
    return float(np.linalg.norm(R) ** 2 + np.dot(eps, tr))


def expected_loglik(state, dico: DictionaryState, Y, theta=None, kappa=None, cfg=None) -> float:
    """Expected log-likelihood (up to a constant) at an arbitrary grid/Doppler vector."""
    A, S = dico.A, dico.S
    if theta is not None or kappa is not None:
        d = build_dictionary(dico.theta if theta is None else theta, dico.kappa if kappa is None else kappa,
                             dico.x, cfg)
        A, S = d.A, d.S
    return -state.alpha_hat * expected_sq_residual(state.U, state.Sigma, A, S, dico.eps, Y)


# ---------------------------------------------------------------- angles


@dataclass
class AngleRefineWorkspace:
    P: np.ndarray
    v: np.ndarray
    stilde: np.ndarray  # rows of S, one per pilot sample
    ytilde: np.ndarray  # columns of Y, one per pilot sample


def offset_normal_equations(C, Cov, A, B, Y):
    """``(P, v)`` of ``E||Y - (A + B diag(beta)) X||^2`` minimised over real ``beta``.

    ``C`` is the posterior mean of ``X`` and ``Cov`` the summed column
    covariance ``sum_t Cov(x_t)``.
    """
    BhB = B.conj().T @ B
    P = np.real(BhB.conj() * (C @ C.conj().T + Cov))
    P = (P + P.T) / 2
    resid = Y - A @ C
    v = np.real(np.sum(C.conj() * (B.conj().T @ resid), axis=1))
    v -= np.real(np.diag(B.conj().T @ A @ Cov))
    return P, v


def angle_workspace(state, dico: DictionaryState, Y) -> AngleRefineWorkspace:
    """Normal equations of the linearised expected residual in the offsets."""
    S = dico.S
    Sig_eps = np.einsum("n,nij->ij", dico.eps, state.Sigma)
    C = state.U @ S.T  # mean of G S^T, column t is U s~_t
    P, v = offset_normal_equations(C, Sig_eps, dico.A, dico.B, Y)
    return AngleRefineWorkspace(P=P, v=v, stilde=S, ytilde=Y)


def offset_limits(theta, half_cell):
    """Per-point offset bounds: at most half a cell, never past the midpoint to a neighbour."""
    order = np.argsort(theta)
    th = theta[order]
    gaps = np.diff(th)
    lo = np.full(th.shape, -half_cell)
    hi = np.full(th.shape, half_cell)
    lo[1:] = np.maximum(lo[1:], -0.45 * gaps)
    hi[:-1] = np.minimum(hi[:-1], 0.45 * gaps)
    lo = np.maximum(lo, -math.pi / 2 - th)
    hi = np.minimum(hi, math.pi / 2 - th)
    out_lo = np.empty_like(lo)
    out_hi = np.empty_like(hi)
    out_lo[order] = lo
    out_hi[order] = hi
    return out_lo, out_hi


def solve_offsets(P, v):
    """``P^{-1} v`` with a ridge fallback; returns ``(beta, used_ridge)``."""
    M = P.shape[0]
    try:
        cf = sla.cho_factor(P, lower=True)
        d = np.diag(cf[0])
        if d.min() > 0 and (d.max() / d.min()) ** 2 < 1e12:
            return sla.cho_solve(cf, v), False
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-8 * max(np.trace(P), 1e-300) / M
    return np.linalg.solve(P + ridge * np.eye(M), v), True


def refine_angles(state, dico: DictionaryState, Y, cfg, half_cell, safeguard=True, active_floor=0.0):
    """One EM step for the angular offsets followed by absorption into the grid.

    Returns ``(beta_new, theta_new, new_dictionary, info)``; the returned
    dictionary is rebuilt at ``theta_new`` with zero offsets.
    """
    ws = angle_workspace(state, dico, Y)
    energy = np.sum(state.varpi, axis=1)
    act = energy >= active_floor * energy.max()
    beta = np.zeros(dico.M_theta)
    ridged = False
    if act.any():
        beta[act], ridged = solve_offsets(ws.P[np.ix_(act, act)], ws.v[act])
    lo, hi = offset_limits(dico.theta, half_cell)
    beta = np.clip(beta, lo, hi)
    info = {"ridge": ridged, "backtracks": 0}
    if safeguard:
        base = expected_loglik(state, dico, Y)
        for _ in range(6):
            trial = expected_loglik(state, dico, Y, theta=dico.theta + beta, cfg=cfg)
            if trial >= base:
                break
            beta = beta / 2
            info["backtracks"] += 1
        else:
            beta = np.zeros_like(beta)
    theta_new = dico.theta + beta
    return beta, theta_new, build_dictionary(theta_new, dico.kappa, dico.x, cfg), info


# ---------------------------------------------------------------- Doppler


@dataclass
class DopplerRefineWorkspace:
    eps_coeffs: np.ndarray
    rho_n: float
    X_shift: np.ndarray
    omega: complex


def _tap_terms(state, dico: DictionaryState, Y, n: int):
    """Residual with tap ``n`` removed, its array-domain vector and the shifted pilot."""
    A, S, U = dico.A, dico.S, state.U
    h = A @ U[:, n]
    R = Y - A @ U @ S.T + np.outer(h, S[:, n])
    xn = np.roll(dico.x, n + 1)
    return R, h, xn


def _poly_coeffs(R, h, xn, alpha):
    L = xn.shape[0]
    t = np.arange(L)
    coeffs = alpha * t * xn * (R.conj().T @ h)
    coeffs[0] = -alpha * np.real(np.vdot(h, h)) * np.sum(t * np.abs(xn) ** 2)
    return coeffs


def doppler_derivative_coeffs(state, dico: DictionaryState, Y, n: int) -> np.ndarray:
    """Coefficients ``eps[0..L-1]`` of ``sum_{t=1}^{L} eps[t-1] omega^t``.

    On the unit circle this polynomial equals ``omega**2`` times the Wirtinger
    derivative of the expected log-likelihood with respect to
    ``omega = exp(2j*pi*kappa_n/L)``, conjugate powers being folded back with
    ``conj(omega) = 1/omega`` after differentiation.  Index ``n`` is 0-based
    (tap ``n + 1``).
    """
    R, h, xn = _tap_terms(state, dico, Y, n)
    return _poly_coeffs(R, h, xn, state.alpha_hat)


def doppler_workspace(state, dico, Y, n) -> DopplerRefineWorkspace:
    return DopplerRefineWorkspace(
        eps_coeffs=doppler_derivative_coeffs(state, dico, Y, n),
        rho_n=float(np.real(np.vdot(dico.A @ state.U[:, n], dico.A @ state.U[:, n]))),
        X_shift=shifted_pilots(dico.x, dico.N_tau),
        omega=np.exp(2j * math.pi * dico.kappa[n] / dico.x.shape[0]),
    )


def poly_value(eps_coeffs, omega):
    """Evaluate ``sum_{t=1}^{L} eps[t-1] omega^t``."""
    return np.polyval(np.r_[eps_coeffs[::-1], 0.0], omega)


def polynomial_roots(eps_coeffs) -> np.ndarray:
    """Nonzero roots of the derivative polynomial (companion-matrix eigenvalues)."""
    c = np.trim_zeros(np.asarray(eps_coeffs)[::-1], "f")
    if c.size <= 1 or not np.any(np.abs(c) > 0):
        return np.empty(0, dtype=complex)
    return np.roots(c)


def select_root(roots, objective, tie_tol=1e-9):
    """Root closest to the unit circle; near-ties go to the better ``objective(omega)``."""
    if len(roots) == 0:
        return None
    dist = np.abs(np.abs(roots) - 1.0)
    best = dist.min()
    cands = roots[dist <= best + tie_tol]
    if len(cands) == 1:
        return cands[0]
    scores = [objective(r / abs(r)) for r in cands]
    return cands[int(np.argmax(scores))]


def tap_objective(R, h, xn, kappa):
    """Doppler-dependent part of the expected log-likelihood for one tap (unscaled)."""
    L = xn.shape[0]
    s = np.exp(2j * math.pi * kappa * np.arange(L) / L) * xn
    return float(np.real(np.vdot(h, R @ s.conj())))


def refine_doppler(state, dico: DictionaryState, Y, cfg, safeguard=True, min_energy=1e-10, limit=None):
    """Per-tap Doppler update from the root of the derivative polynomial.

    Taps are visited in order with the residual refreshed after each accepted
    move.  Taps whose array-domain energy is below ``min_energy * ||Y||^2``
    carry no Doppler information and are skipped.  Returns
    ``(kappa_new, new_dictionary, info)``.
    """
    L = dico.x.shape[0]
    t = np.arange(L)
    kappa = dico.kappa.copy()
    S = dico.S.copy()
    AU = dico.A @ state.U
    R = Y - AU @ S.T
    floor = min_energy * np.linalg.norm(Y) ** 2
    info = {"degenerate": 0, "rejected": 0}
    for n in range(dico.N_tau):
        h = AU[:, n]
        if np.real(np.vdot(h, h)) <= floor:
            info["degenerate"] += 1
            continue
        Rn = R + np.outer(h, S[:, n])
        xn = np.roll(dico.x, n + 1)
        roots = polynomial_roots(_poly_coeffs(Rn, h, xn, state.alpha_hat))
        if roots.size == 0 or not np.all(np.isfinite(roots)):
            info["degenerate"] += 1
            continue
        obj = lambda w: tap_objective(Rn, h, xn, L * np.angle(w) / (2 * math.pi))
        w = select_root(roots, obj)
        k_new = L * np.angle(w) / (2 * math.pi)
        if limit is not None:
            k_new = float(np.clip(k_new, -limit, limit))
        if safeguard and tap_objective(Rn, h, xn, k_new) < tap_objective(Rn, h, xn, kappa[n]):
            info["rejected"] += 1
            continue
        kappa[n] = k_new
        S[:, n] = np.exp(2j * math.pi * k_new * t / L) * xn
        R = Rn - np.outer(h, S[:, n])
    new = DictionaryState(dico.theta, dico.beta, kappa, dico.x, dico.A, dico.B, S, dico.eps.copy())
    return kappa, new, info
