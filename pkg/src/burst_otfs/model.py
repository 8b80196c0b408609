"""MIMO-OTFS uplink signal model.

Pilots, steering/delay-Doppler dictionaries, ground-truth cluster channels,
received blocks and the channel-level error metric.

Conventions used throughout the package:

* ``Y`` is ``N_BS x L`` (antennas by pilot samples); ``vec`` is column-major,
  so ``vec(Y)[t*N_BS + r] == Y[r, t]``.
* The cyclic shift ``Pi`` moves samples down by one, ``(Pi x)[t] = x[t-1]``,
  hence ``Pi^n x == np.roll(x, n)``.
* Doppler is carried in pilot-normalised units ``kappa``: the phase on sample
  ``t`` is ``exp(2j*pi*kappa*t/L)``.  ``kappa = nu * L / (M * delta_f)``.
* SNR is the average per-entry power of the noiseless ``Y`` over ``sigma2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


def make_rng(seed) -> np.random.Generator:
    """Philox generator from an int, a ``SeedSequence`` or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SystemConfig:
    M: int = 256
    N: int = 128
    delta_f: float = 15e3
    f0: float = 6e9
    L: int = 40
    N_BS: int = 40
    spacings: tuple = ()
    M_theta: int = 90
    N_tau: int = 20

    def __post_init__(self):
        for name in ("M", "N", "L", "N_BS", "M_theta", "N_tau"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.delta_f <= 0 or self.f0 <= 0:
            raise ValueError("delta_f and f0 must be positive")
        if self.L < self.N_tau:
            raise ValueError(f"pilot length L={self.L} shorter than delay grid N_tau={self.N_tau}")
        if not self.spacings:
            # half-wavelength ULA by default
            object.__setattr__(self, "spacings", tuple(r * self.wavelength / 2 for r in range(self.N_BS)))
        sp = np.asarray(self.spacings, dtype=float)
        if sp.shape != (self.N_BS,):
            raise ValueError("need one spacing per antenna")
        if sp[0] != 0 or np.any(np.diff(sp) <= 0):
            raise ValueError("spacings must start at 0 and increase strictly")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f0

    @property
    def spacing_array(self) -> np.ndarray:
        return np.asarray(self.spacings, dtype=float)

    def replace(self, **changes) -> "SystemConfig":
        fields_ = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if "N_BS" in changes and "spacings" not in changes:
            fields_["spacings"] = ()
        fields_.update(changes)
        return SystemConfig(**fields_)

    def hz_to_kappa(self, nu):
        return np.asarray(nu) * self.L / (self.M * self.delta_f)

    def kappa_to_hz(self, kappa):
        return np.asarray(kappa) * self.M * self.delta_f / self.L


def angle_grid(cfg: SystemConfig) -> np.ndarray:
    """Cell centres of ``M_theta`` equal cells covering [-pi/2, pi/2]."""
    step = math.pi / cfg.M_theta
    return -math.pi / 2 + step * (np.arange(cfg.M_theta) + 0.5)


def grid_step(cfg: SystemConfig) -> float:
    return math.pi / cfg.M_theta


# ---------------------------------------------------------------- pilots


@dataclass
class PilotSignal:
    x: np.ndarray
    dd_block: np.ndarray | None = None


def assemble_time_block(dd_block, cfg: SystemConfig) -> np.ndarray:
    """Rectangular-pulse OTFS modulator: ``X = X_DD @ F_N^H`` with unitary DFT."""
    dd_block = np.asarray(dd_block, dtype=complex)
    if dd_block.shape != (cfg.M, cfg.N):
        raise ValueError(f"expected {(cfg.M, cfg.N)} block, got {dd_block.shape}")
    return np.fft.ifft(dd_block, axis=1, norm="ortho")


def generate_pilot(cfg: SystemConfig, seed) -> PilotSignal:
    """Unit-modulus QPSK pilot of length ``L``."""
    rng = make_rng(seed)
    phases = rng.integers(0, 4, size=cfg.L)
    return PilotSignal(x=np.exp(0.5j * math.pi * phases + 0.25j * math.pi))


# ---------------------------------------------------------------- dictionaries


def array_response(theta, cfg: SystemConfig):
    """Steering vector(s) and their derivative with respect to the angle.

    Scalar ``theta`` gives two ``N_BS`` vectors; an array of angles gives two
    ``N_BS x len(theta)`` matrices with one column per angle.
    """
    th = np.asarray(theta, dtype=float)
    k = 2 * math.pi * cfg.spacing_array / cfg.wavelength
    phase = np.multiply.outer(k, np.sin(th))
    a = np.exp(1j * phase)
    b = a * 1j * np.multiply.outer(k, np.cos(th))
    return a, b


def doppler_ramp(kappa, L: int) -> np.ndarray:
    t = np.arange(L)
    return np.exp(2j * math.pi * np.multiply.outer(np.asarray(kappa, dtype=float), t) / L)


def delay_doppler_atom(n: int, kappa: float, x) -> np.ndarray:
    """``s_n(kappa) = Delta^kappa Pi^n x``."""
    x = np.asarray(x)
    L = x.shape[0]
    if not 0 <= n <= L:
        raise ValueError(f"delay tap {n} outside [0, {L}]")
    return doppler_ramp(kappa, L) * np.roll(x, n)


def shifted_pilots(x, N_tau: int) -> np.ndarray:
    """``L x N_tau`` matrix ``[Pi x, Pi^2 x, ..., Pi^N_tau x]``."""
    x = np.asarray(x)
    L = x.shape[0]
    return x[(np.arange(L)[:, None] - np.arange(1, N_tau + 1)[None, :]) % L]


def atom_matrix(kappa, x) -> np.ndarray:
    """``S(kappa)``: column ``n-1`` is ``s_n(kappa_n)``."""
    kappa = np.asarray(kappa, dtype=float)
    X = shifted_pilots(x, kappa.shape[0])
    return doppler_ramp(kappa, X.shape[0]).T * X


@dataclass
class DictionaryState:
    theta: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    x: np.ndarray
    A: np.ndarray
    B: np.ndarray
    S: np.ndarray
    eps: np.ndarray

    @property
    def M_theta(self):
        return self.theta.shape[0]

    @property
    def N_tau(self):
        return self.kappa.shape[0]


def build_dictionary(theta, kappa, x, cfg: SystemConfig, beta=None) -> DictionaryState:
    theta = np.array(theta, dtype=float)
    beta = np.zeros_like(theta) if beta is None else np.array(beta, dtype=float)
    kappa = np.array(kappa, dtype=float)
    x = np.asarray(x, dtype=complex)
    A, B = array_response(theta + beta, cfg)
    S = atom_matrix(kappa, x)
    eps = np.real(np.sum(S * S.conj(), axis=0))
    return DictionaryState(theta, beta, kappa, x, A, B, S, eps)


def initial_dictionary(cfg: SystemConfig, x) -> DictionaryState:
    return build_dictionary(angle_grid(cfg), np.zeros(cfg.N_tau), x, cfg)


# ---------------------------------------------------------------- channels


@dataclass(frozen=True)
class Path:
    gain: complex
    aoa: float
    delay_tap: int
    doppler: float  # kappa units


@dataclass
class ChannelRealization:
    paths: list = field(default_factory=list)

    def __post_init__(self):
        for p in self.paths:
            if not np.isfinite(p.gain):
                raise ValueError("non-finite path gain")
            if abs(p.aoa) > math.pi / 2 + 1e-12:
                raise ValueError(f"AoA {p.aoa} outside [-pi/2, pi/2]")

    def check(self, cfg: SystemConfig):
        for p in self.paths:
            if not 1 <= p.delay_tap <= cfg.N_tau:
                raise ValueError(f"delay tap {p.delay_tap} outside [1, {cfg.N_tau}]")
        return self

    @property
    def gains(self):
        return np.array([p.gain for p in self.paths], dtype=complex)

    @property
    def aoas(self):
        return np.array([p.aoa for p in self.paths], dtype=float)

    @property
    def delays(self):
        return np.array([p.delay_tap for p in self.paths], dtype=int)

    @property
    def dopplers(self):
        return np.array([p.doppler for p in self.paths], dtype=float)


@dataclass(frozen=True)
class ClusterSpec:
    n_clusters: int = 2
    sub_paths: int = 10
    spread_deg: float = 3.0
    aoa_range_deg: tuple = (-60.0, 60.0)
    delay_taps: tuple = (1, 20)
    doppler_hz: float = 2000.0


def draw_cluster_channel(cfg: SystemConfig, spec: ClusterSpec, seed) -> ChannelRealization:
    """Clustered multipath: uniform cluster centres, sub-paths within the spread.

    Gains are CN(0, 1/P) so the average received power per entry is about one.
    """
    lo, hi = spec.aoa_range_deg
    if lo < -90 or hi > 90 or lo > hi:
        raise ValueError("cluster AoA range must lie in [-90, 90] degrees")
    if spec.delay_taps[0] < 1 or spec.delay_taps[1] > cfg.N_tau:
        raise ValueError(f"delay taps {spec.delay_taps} exceed the delay grid 1..{cfg.N_tau}")
    rng = make_rng(seed)
    P = spec.n_clusters * spec.sub_paths
    centres = rng.uniform(lo, hi, size=spec.n_clusters)
    offsets = rng.uniform(-spec.spread_deg, spec.spread_deg, size=(spec.n_clusters, spec.sub_paths))
    aoas = np.clip(centres[:, None] + offsets, -90.0, 90.0).ravel()
    return random_paths(np.deg2rad(aoas), cfg, rng, delay_taps=spec.delay_taps, doppler_hz=spec.doppler_hz, n_total=P)


def random_paths(aoas, cfg: SystemConfig, rng, delay_taps=None, doppler_hz=2000.0, n_total=None):
    """Paths at the given AoAs (radians) with random gains, delays and Dopplers."""
    rng = make_rng(rng)
    aoas = np.asarray(aoas, dtype=float)
    P = aoas.shape[0] if n_total is None else n_total
    lo, hi = delay_taps if delay_taps is not None else (1, cfg.N_tau)
    gains = (rng.standard_normal(P) + 1j * rng.standard_normal(P)) / math.sqrt(2 * P)
    delays = rng.integers(lo, hi + 1, size=P)
    kappas = cfg.hz_to_kappa(rng.uniform(-doppler_hz, doppler_hz, size=P))
    paths = [Path(complex(g), float(a), int(d), float(k)) for g, a, d, k in zip(gains, aoas, delays, kappas)]
    return ChannelRealization(paths).check(cfg)


# ---------------------------------------------------------------- received signal


@dataclass
class ReceivedBlock:
    Y: np.ndarray
    sigma2: float
    snr_db: float


def noiseless_received(channel: ChannelRealization, x, cfg: SystemConfig) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    Y = np.zeros((cfg.N_BS, x.shape[0]), dtype=complex)
    for p in channel.paths:
        a, _ = array_response(p.aoa, cfg)
        Y += p.gain * np.outer(a, delay_doppler_atom(p.delay_tap, p.doppler, x))
    return Y


def complex_noise(rng, shape, sigma2: float) -> np.ndarray:
    return math.sqrt(sigma2 / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synthesize_received(channel, x, cfg: SystemConfig, sigma2: float, seed) -> ReceivedBlock:
    """``Y = sum_p h_p a(theta_p) s(kappa_p, l_p)^T + W`` with ``W ~ CN(0, sigma2)``."""
    Y0 = noiseless_received(channel, x, cfg)
    p_sig = float(np.mean(np.abs(Y0) ** 2))
    snr_db = math.inf if sigma2 == 0 else 10 * math.log10(p_sig / sigma2) if p_sig > 0 else -math.inf
    W = complex_noise(make_rng(seed), Y0.shape, sigma2) if sigma2 > 0 else 0.0
    return ReceivedBlock(Y0 + W, float(sigma2), snr_db)


def received_at_snr(channel, x, cfg: SystemConfig, snr_db: float, seed) -> ReceivedBlock:
    Y0 = noiseless_received(channel, x, cfg)
    if math.isinf(snr_db) and snr_db > 0:
        return ReceivedBlock(Y0, 0.0, snr_db)
    sigma2 = float(np.mean(np.abs(Y0) ** 2)) / 10 ** (snr_db / 10)
    W = complex_noise(make_rng(seed), Y0.shape, sigma2)
    return ReceivedBlock(Y0 + W, sigma2, float(snr_db))


def tap_channel_matrix(V, kappa, taps, L: int) -> np.ndarray:
    """``sum_j (Delta^kappa_j Pi^taps_j) kron V[:, j]`` as an ``(L*N_BS) x L`` matrix."""
    V = np.asarray(V, dtype=complex)
    kappa = np.asarray(kappa, dtype=float)
    taps = np.asarray(taps, dtype=int)
    N_BS = V.shape[0]
    H = np.zeros((L, N_BS, L), dtype=complex)
    t = np.arange(L)
    ramps = doppler_ramp(kappa, L)
    for j in range(V.shape[1]):
        # (Delta^k Pi^l)[t, t'] = ramp[t] when t = t' + l (mod L)
        H[t, :, (t - taps[j]) % L] += ramps[j][:, None] * V[:, j][None, :]
    return H.reshape(L * N_BS, L)


def full_channel_matrix(channel: ChannelRealization, cfg: SystemConfig) -> np.ndarray:
    """``H = sum_p h_p (Delta^{k_p} Pi^{l_p}) kron a(theta_p)``, so ``vec(Y - W) = H x``."""
    if not channel.paths:
        return np.zeros((cfg.L * cfg.N_BS, cfg.L), dtype=complex)
    channel.check(cfg)
    a, _ = array_response(channel.aoas, cfg)
    return tap_channel_matrix(a * channel.gains, channel.dopplers, channel.delays, cfg.L)


def channel_from_coefficients(U, A, kappa, L: int) -> np.ndarray:
    """Channel implied by a tap-wise coefficient matrix ``U`` (``M x N_tau``) and dictionary ``A``."""
    N_tau = U.shape[1]
    return tap_channel_matrix(A @ U, kappa, np.arange(1, N_tau + 1), L)


def nmse(H_true_list, H_est_list) -> float:
    if len(H_true_list) == 0:
        raise ValueError("empty trial list")
    if len(H_true_list) != len(H_est_list):
        raise ValueError("truth and estimate lists differ in length")
    total = 0.0
    for H, Hh in zip(H_true_list, H_est_list):
        H = np.asarray(H)
        Hh = np.asarray(Hh)
        if H.shape != Hh.shape:
            raise ValueError(f"shape mismatch {H.shape} vs {Hh.shape}")
        den = np.linalg.norm(H) ** 2
        if den == 0:
            raise ValueError("zero-norm true channel")
        total += np.linalg.norm(H - Hh) ** 2 / den
    return float(total / len(H_true_list))


def phase_accumulations(cfg: SystemConfig, v_user: float, theta_max: float, tau_max_tap: int):
    """Maximum phase swings over the pilot from Doppler, angle and delay.

    ``v_user`` in m/s.  The angle term uses the first inter-antenna spacing
    as the element pitch ``d``.
    """
    nu_max = cfg.f0 * v_user / SPEED_OF_LIGHT
    phi_nu = 2 * math.pi * nu_max * cfg.L / (cfg.M * cfg.delta_f)
    d = cfg.spacing_array[1] if cfg.N_BS > 1 else 0.0
    phi_theta = 2 * math.pi * cfg.N_BS * d * math.sin(theta_max) / cfg.wavelength
    phi_tau = -2 * math.pi * cfg.f0 * tau_max_tap / (cfg.M * cfg.delta_f)
    return phi_nu, phi_theta, phi_tau
