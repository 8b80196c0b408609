"""Reference estimators: LS, l1 (FISTA), row-sparse OGVBI and vectorised OGVBI.

LS and l1 are handed the true per-tap Doppler (``oracle_kappa``); the two
OGVBI variants estimate angle offsets with a first-order Taylor dictionary
on a fixed grid.  Every estimator returns a ``vbi.EstimationResult`` so the
harness can treat all methods alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (
    SystemConfig,
    angle_grid,
    array_response,
    atom_matrix,
    channel_from_coefficients,
    grid_step,
    shifted_pilots,
)
from .refine import offset_normal_equations, solve_offsets
from .vbi import EstimationResult, _hermitian_inverse, data_scale


def oracle_kappa(channel, cfg: SystemConfig) -> np.ndarray:
    """Per-tap Doppler of the strongest path on that tap (0 for empty taps)."""
    kappa = np.zeros(cfg.N_tau)
    best = np.zeros(cfg.N_tau)
    for p in channel.paths:
        n = p.delay_tap - 1
        if abs(p.gain) > best[n]:
            best[n] = abs(p.gain)
            kappa[n] = p.doppler
    return kappa


# ---------------------------------------------------------------- vectorised model


@dataclass
class VectorizedModel:
    Phi: np.ndarray  # (L*N_BS) x (N_tau*M_theta), columns ordered n*M + m
    y: np.ndarray


def check_memory(n_coef: int, max_bytes: float):
    need = 16.0 * n_coef**2
    if need > max_bytes:
        raise MemoryError(f"dense {n_coef}x{n_coef} covariance needs {need / 2**20:.0f} MiB "
                          f"> budget {max_bytes / 2**20:.0f} MiB")


def build_vectorized_dictionary(A, S, Y=None, max_bytes=2**31) -> VectorizedModel:
    """``vec(A G S^T) = (S kron A) vec(G)`` with column-major ``vec``."""
    check_memory(A.shape[1] * S.shape[1], max_bytes)
    Phi = np.kron(S, A)
    y = None if Y is None else np.asarray(Y).reshape(-1, order="F")
    return VectorizedModel(Phi, y)


def _result(U, theta, kappa, A, cfg, iters=1, alpha=math.nan, converged=True, trace=None, **diag):
    H = channel_from_coefficients(U, A, kappa, cfg.L)
    return EstimationResult(U=U, theta_refined=np.asarray(theta, dtype=float).copy(),
                            kappa_refined=np.asarray(kappa, dtype=float).copy(), H_hat=H,
                            free_energy_trace=[] if trace is None else trace, iters=iters,
                            alpha_hat=float(alpha), converged=converged, diagnostics=diag)


# ---------------------------------------------------------------- LS


def ls_estimate(Y, x, cfg: SystemConfig, kappa) -> EstimationResult:
    """Minimum-norm least squares on the on-grid dictionary with known Doppler.

    ``pinv(S kron A) = pinv(S) kron pinv(A)``, so the estimate is
    ``pinv(A) Y pinv(S)^T`` without forming the big matrix.
    """
    theta = angle_grid(cfg)
    A, _ = array_response(theta, cfg)
    S = atom_matrix(kappa, x)
    G = np.linalg.pinv(A) @ Y @ np.linalg.pinv(S).T
    return _result(G, theta, kappa, A, cfg, oracle_kappa=True, reconstruction="grid dictionary, true kappa")


# ---------------------------------------------------------------- l1


def soft_threshold(Z, tau):
    mag = np.abs(Z)
    return Z * np.maximum(0.0, 1.0 - tau / np.maximum(mag, 1e-300))


def universal_lambda(sigma2, A, S):
    """``sigma * ||phi|| * sqrt(2 log p)`` for the (uniform) column norm of ``S kron A``."""
    col = math.sqrt(np.mean(np.sum(np.abs(A) ** 2, axis=0)) * np.mean(np.sum(np.abs(S) ** 2, axis=0)))
    p = A.shape[1] * S.shape[1]
    return math.sqrt(sigma2) * col * math.sqrt(2 * math.log(p))


def fista(A, S, Y, lam, max_iters=2000, tol=1e-8, L0=1.0, eta=2.0):
    """Accelerated proximal gradient for ``0.5||Y - A G S^T||^2 + lam ||G||_1``.

    Step sizes come from backtracking on the quadratic upper bound.
    Returns ``(G, objective_trace)``.
    """
    M, N = A.shape[1], S.shape[1]
    Ah, Sc = A.conj().T, S.conj()

    def f(G):
        return 0.5 * np.linalg.norm(Y - A @ G @ S.T) ** 2

    def grad(G):
        return -Ah @ (Y - A @ G @ S.T) @ Sc

    G = np.zeros((M, N), dtype=complex)
    Z, t, Lk = G.copy(), 1.0, L0
    trace = [f(G)]
    for _ in range(max_iters):
        fz, gz = f(Z), grad(Z)
        while True:
            G_new = soft_threshold(Z - gz / Lk, lam / Lk)
            D = G_new - Z
            if f(G_new) <= fz + np.real(np.vdot(gz, D)) + 0.5 * Lk * np.linalg.norm(D) ** 2:
                break
            Lk *= eta
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        Z = G_new + ((t - 1) / t_new) * (G_new - G)
        G, t = G_new, t_new
        trace.append(f(G) + lam * np.sum(np.abs(G)))
        if abs(trace[-1] - trace[-2]) <= tol * abs(trace[-1]):
            break
    return G, trace


def l1_estimate(Y, x, cfg: SystemConfig, kappa, sigma2, lam=None, lam_scale=1.0, max_iters=2000,
                tol=1e-8) -> EstimationResult:
    """l1-regularised recovery on the on-grid dictionary with known Doppler."""
    theta = angle_grid(cfg)
    A, _ = array_response(theta, cfg)
    S = atom_matrix(kappa, x)
    if lam is None:
        lam = lam_scale * universal_lambda(sigma2, A, S)
    G, trace = fista(A, S, Y, lam, max_iters=max_iters, tol=tol)
    return _result(G, theta, kappa, A, cfg, iters=len(trace) - 1, converged=len(trace) - 1 < max_iters,
                   trace=trace, oracle_kappa=True, reconstruction="grid dictionary, true kappa", lam=lam)


# ---------------------------------------------------------------- OGVBI (row-sparse)


def fit_tap_dopplers(C, x, N_tau, max_passes=30, grid_step_kappa=0.05, ktol=1e-7):
    """Fit ``C ~ G S(kappa)^T`` tap by tap.

    For each tap the Doppler maximises the energy of the tap residual
    matched to ``s_n(kappa)`` (coarse grid over one period, then a bounded
    scalar polish); gains follow by least squares.  Passes over the taps
    repeat until no Doppler moves by more than ``ktol``.  Returns
    ``(G, kappa)``.
    """
    L = C.shape[1]
    t = np.arange(L)
    X = shifted_pilots(x, N_tau)
    kappa = np.zeros(N_tau)
    S = atom_matrix(kappa, x)
    G = C @ np.linalg.pinv(S).T
    grid = np.arange(-L / 2, L / 2, grid_step_kappa)
    E = np.exp(-2j * math.pi * np.outer(t, grid) / L)
    for _ in range(max_passes):
        k_prev = kappa.copy()
        for n in range(N_tau):
            R = C - G @ S.T + np.outer(G[:, n], S[:, n])
            Z = R * X[:, n].conj()
            score = np.sum(np.abs(Z @ E) ** 2, axis=0)
            k0 = grid[int(np.argmax(score))]
            res = minimize_scalar(
                lambda k: -np.sum(np.abs(Z @ np.exp(-2j * math.pi * k * t / L)) ** 2),
                bounds=(k0 - grid_step_kappa, k0 + grid_step_kappa), method="bounded",
                options={"xatol": 1e-6})
            kappa[n] = res.x
            S[:, n] = np.exp(2j * math.pi * kappa[n] * t / L) * X[:, n]
            G[:, n] = R @ S[:, n].conj() / np.real(np.vdot(S[:, n], S[:, n]))
        if np.max(np.abs(kappa - k_prev)) <= ktol:
            break
    G = C @ np.linalg.pinv(S).T
    return G, kappa


def ogvbi_reconstruct(C, theta, x, cfg: SystemConfig, row_floor=1e-3):
    """Channel from a row-sparse ``C = G S^T``: significant rows only, exact steering at ``theta``."""
    energy = np.sum(np.abs(C) ** 2, axis=1)
    rows = energy >= row_floor * energy.max() if energy.max() > 0 else np.zeros(C.shape[0], bool)
    U = np.zeros((C.shape[0], cfg.N_tau), dtype=complex)
    kappa = np.zeros(cfg.N_tau)
    if rows.any():
        U[rows], kappa = fit_tap_dopplers(C[rows], x, cfg.N_tau)
    A, _ = array_response(theta, cfg)
    return U, kappa, A, int(rows.sum())


def subspace_noise_level(Y):
    """Median eigenvalue of the sample covariance ``Y Y^H / L``: a rough noise power."""
    ev = np.linalg.eigvalsh(Y @ Y.conj().T / Y.shape[1])
    return max(float(np.median(ev)), 1e-300)


def ogvbi_estimate(Y, x, cfg: SystemConfig, c=1e-3, d=1e-3, max_iters=60, tol=1e-6, normalize=True,
                   alpha0=None, callback=None) -> EstimationResult:
    """Off-grid multiple-measurement-vector SBL on ``Y = (A + B diag(beta)) C + W``.

    Rows of ``C`` share a Gamma precision; the offsets ``beta`` stay relative
    to a fixed grid and are bounded by half a cell.  Iteration stops on the
    relative change of the posterior mean.  Started at ``alpha = 1`` the
    row model absorbs the noise in its first pass and never recovers, so
    the noise variance starts at 1% of the data power unless ``alpha0`` is
    given (``1 / subspace_noise_level(Y)`` is a steadier alternative at low
    SNR).  ``callback(it, C, theta)``
    receives the unscaled mean after each iteration.
    """
    Y = np.asarray(Y, dtype=complex)
    N_BS, L = Y.shape
    k = data_scale(Y) if normalize else 1.0
    Yn = k * Y
    theta = angle_grid(cfg)
    M = theta.shape[0]
    A, B = array_response(theta, cfg)
    half = grid_step(cfg) / 2
    beta = np.zeros(M)
    delta = np.ones(M)
    # noise variance starts at 1% of the data power
    alpha = (100.0 / np.mean(np.abs(Y) ** 2) if alpha0 is None else alpha0) * k**-2
    mu = np.zeros((M, L), dtype=complex)
    it, converged, jitter = 0, False, 0
    for it in range(1, max_iters + 1):
        Phi = A + B * beta
        Q = Phi.conj().T @ Phi
        Prec = alpha * Q
        Prec[np.diag_indices(M)] += delta
        Sig, _, jit = _hermitian_inverse(Prec)
        jitter += int(jit)
        mu_old = mu
        mu = alpha * (Sig @ (Phi.conj().T @ Yn))
        sd = np.real(np.diag(Sig))
        delta = (c + L) / (d + np.sum(np.abs(mu) ** 2, axis=1) + L * sd)
        esq = np.linalg.norm(Yn - Phi @ mu) ** 2 + L * np.real(np.sum(Q.T * Sig))
        alpha = (c + N_BS * L) / (d + esq)
        P, v = offset_normal_equations(mu, L * Sig, A, B, Yn)
        beta = np.clip(solve_offsets(P, v)[0], -half, half)
        if callback is not None:
            callback(it, mu / k, theta + beta)
        change = np.linalg.norm(mu - mu_old) / max(np.linalg.norm(mu), 1e-300)
        if change <= tol:
            converged = True
            break
    U, kappa, A_hat, n_rows = ogvbi_reconstruct(mu / k, theta + beta, x, cfg)
    return _result(U, theta + beta, kappa, A_hat, cfg, iters=it, alpha=alpha * k**2, converged=converged,
                   row_estimate=mu / k, rows_used=n_rows, jitter_events=jitter,
                   reconstruction="per-tap Doppler fit of significant rows, exact steering")


# ---------------------------------------------------------------- vectorised OGVBI


def doppler_derivative_atoms(x, N_tau):
    """``d s_n(kappa) / d kappa`` at ``kappa = 0`` for every tap (``L x N_tau``)."""
    L = np.asarray(x).shape[0]
    return (2j * math.pi * np.arange(L) / L)[:, None] * shifted_pilots(x, N_tau)


def vector_posterior(A, S, Y, alpha, xi):
    """Gaussian posterior of ``vec(G)`` under ``vec(Y) = (S kron A) vec(G) + w``.

    ``xi`` holds the prior precisions in ``vec`` order (index ``n*M + m``).
    Returns ``(U, Sigma, logdet, jittered)`` with ``U`` the ``M x N_tau`` mean.
    """
    M, N = A.shape[1], S.shape[1]
    Q = A.conj().T @ A
    K = S.conj().T @ S
    Prec = alpha * np.kron(K, Q)
    Prec[np.diag_indices(M * N)] += xi
    Sig, logdet, jit = _hermitian_inverse(Prec)
    b = (A.conj().T @ Y @ S.conj()).reshape(-1, order="F")
    mu = alpha * (Sig @ b)
    return mu.reshape(N, M).T, Sig, logdet, jit


def vector_expected_residual(A, S, U, S4, Y):
    """``E||Y - A G S^T||^2`` under the joint posterior, plus ``T[a, b] = tr(A^H A Cov(g_a, g_b))``.

    ``S4`` is the posterior covariance reshaped to ``N x M x N x M``.
    """
    Q, K = A.conj().T @ A, S.conj().T @ S
    T = np.einsum("ij,ajbi->ab", Q, S4)
    esq = np.linalg.norm(Y - A @ U @ S.T) ** 2 + np.real(np.sum(K * T.T))
    return float(esq), T


def vector_doppler_equations(A, U, S4, S0, D, Y):
    """``(P, v)`` of ``E||Y - A G (S0 + D diag(dk))^T||^2`` minimised over real ``dk``."""
    Q = A.conj().T @ A
    T = np.einsum("ij,ajbi->ab", Q, S4)
    Ehh = U.conj().T @ Q @ U + T.T  # E[h_n^H h_n'], h_n = A g_n
    P = np.real(Ehh * (D.conj().T @ D))
    v = np.real(np.sum((A @ U).conj() * (Y @ D.conj()), axis=0) - np.sum(Ehh * (D.conj().T @ S0), axis=1))
    return (P + P.T) / 2, v


def vector_ogvbi_estimate(Y, x, cfg: SystemConfig, c=1e-3, d=1e-3, max_iters=60, tol=1e-6, normalize=True,
                          kappa_bound=0.5, max_bytes=2**31, callback=None) -> EstimationResult:
    """Standard VBI over the whole ``vec(G)`` with one dense covariance per sweep.

    Both dictionaries are linearised: ``A + B diag(beta)`` on a fixed angle
    grid and ``S0 + D diag(dk)`` around zero Doppler.  The offsets are EM
    updates against the full posterior, ``beta`` bounded by half a cell and
    ``dk`` by ``kappa_bound``.
    """
    Y = np.asarray(Y, dtype=complex)
    N_BS, L = Y.shape
    N = cfg.N_tau
    theta = angle_grid(cfg)
    M = theta.shape[0]
    check_memory(M * N, max_bytes)
    k = data_scale(Y) if normalize else 1.0
    Yn = k * Y
    A, B = array_response(theta, cfg)
    S0 = atom_matrix(np.zeros(N), x)
    D = doppler_derivative_atoms(x, N)
    half = grid_step(cfg) / 2
    beta, dk = np.zeros(M), np.zeros(N)
    xi = np.ones(M * N)
    alpha = 1.0
    U = np.zeros((M, N), dtype=complex)
    it, converged, jitter = 0, False, 0
    for it in range(1, max_iters + 1):
        Ab = A + B * beta
        Sk = S0 + D * dk
        U_old = U
        U, Sig, _, jit = vector_posterior(Ab, Sk, Yn, alpha, xi)
        jitter += int(jit)
        S4 = Sig.reshape(N, M, N, M)
        mu = U.T.ravel()
        xi = (c + 1.0) / (d + np.abs(mu) ** 2 + np.real(np.diag(Sig)))
        esq, _ = vector_expected_residual(Ab, Sk, U, S4, Yn)
        alpha = (c + N_BS * L) / (d + esq)
        # angle offsets with the Doppler part held fixed
        Kt = Sk.T @ Sk.conj()
        Cov = np.einsum("ab,aibj->ij", Kt, S4)
        P, v = offset_normal_equations(U @ Sk.T, Cov, A, B, Yn)
        beta = np.clip(solve_offsets(P, v)[0], -half, half)
        # Doppler offsets with the new angles
        Pk, vk = vector_doppler_equations(A + B * beta, U, S4, S0, D, Yn)
        dk = np.clip(solve_offsets(Pk, vk)[0], -kappa_bound, kappa_bound)
        if callback is not None:
            callback(it, U / k, theta + beta, dk)
        change = np.linalg.norm(U - U_old) / max(np.linalg.norm(U), 1e-300)
        if change <= tol:
            converged = True
            break
    A_hat, _ = array_response(theta + beta, cfg)
    return _result(U / k, theta + beta, dk, A_hat, cfg, iters=it, alpha=alpha * k**2, converged=converged,
                   jitter_events=jitter, reconstruction="exact steering and Doppler ramp at the offsets")
