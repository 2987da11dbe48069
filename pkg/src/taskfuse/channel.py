"""MIMO multiple-access channel model with successive interference
cancellation: channel sampling, decode ordering, per-user and sum rates,
MMSE and SNR reporting.

Rates are in nats throughout (the per-user MSE is exp(-rate), which pins the
log base); dB conversions happen only at the reporting boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng

PATH_LOSS_EXPONENT = 3.5
PATH_LOSS_REF_M = 100.0


class SingularNoiseError(np.linalg.LinAlgError):
    """Raised when a noise covariance (or SIC interference matrix) cannot be
    inverted beyond the regularization floor."""


def path_loss(distance_m) -> np.ndarray:
    """PL(d) = (d / 100 m)^-3.5, unit gain at the 100 m reference."""
    d = np.asarray(distance_m, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    return (d / PATH_LOSS_REF_M) ** (-PATH_LOSS_EXPONENT)


def sample_channels(Q: int, N_R: int, positions, seed) -> np.ndarray:
    """Rayleigh-faded user channels: column q is sqrt(PL(d_q)) * g_q with
    g_q standard complex Gaussian. Deterministic per seed."""
    if Q < 1 or N_R < 1:
        raise ValueError("Q and N_R must be >= 1")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (Q,):
        raise ValueError(f"positions must have shape ({Q},)")
    pl = path_loss(positions)
    rng = derive_rng("channel", seed)
    g = (rng.standard_normal((N_R, Q)) + 1j * rng.standard_normal((N_R, Q))) / np.sqrt(2.0)
    return g * np.sqrt(pl)[None, :]


def sic_order(H: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Decode order: ascending p_q * ||h_q||^2, ties broken by user index.
    Users later in the order see less interference (the last decoded, the
    strongest user, faces noise only)."""
    H = np.asarray(H)
    p = np.asarray(p, dtype=np.float64)
    if H.ndim != 2 or p.shape != (H.shape[1],):
        raise ValueError("H must be N_R x Q with p of length Q")
    metric = p * np.sum(np.abs(H) ** 2, axis=0)
    return np.argsort(metric, kind="stable")


@dataclass(frozen=True)
class ChannelState:
    """One channel realization plus the operating point."""

    H: np.ndarray              # complex N_R x Q
    p: np.ndarray              # transmit powers (W)
    P_max: np.ndarray          # per-user caps (W)
    C_z: np.ndarray            # Hermitian PSD noise covariance, trace <= P_N
    P_N: float                 # total noise power budget (W)
    positions: np.ndarray      # per-user distance (m)
    order: np.ndarray | None = None  # SIC permutation, derived if omitted

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.complex128)
        p = np.asarray(self.p, dtype=np.float64)
        pmax = np.asarray(self.P_max, dtype=np.float64)
        C = np.asarray(self.C_z, dtype=np.complex128)
        pos = np.asarray(self.positions, dtype=np.float64)
        n_r, q = H.shape
        if p.shape != (q,) or pmax.shape != (q,) or pos.shape != (q,):
            raise ValueError("p, P_max and positions must all have length Q")
        if C.shape != (n_r, n_r):
            raise ValueError("C_z must be N_R x N_R")
        if np.any(p < 0) or np.any(p > pmax * (1 + 1e-9)):
            raise ValueError("powers must satisfy 0 <= p_q <= P_max,q")
        herm = np.max(np.abs(C - C.conj().T))
        if herm > 1e-12 * max(1.0, float(np.abs(C).max())):
            raise ValueError("C_z is not Hermitian")
        ev = np.linalg.eigvalsh(C)
        if ev.min() < -1e-12 * max(1.0, ev.max()):
            raise ValueError("C_z is not positive semidefinite")
        if np.real(np.trace(C)) > self.P_N * (1 + 1e-9):
            raise ValueError("trace(C_z) exceeds the noise power budget")
        order = self.order if self.order is not None else sic_order(H, p)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "P_max", pmax)
        object.__setattr__(self, "C_z", C)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "order", np.asarray(order, dtype=np.int64))

    @property
    def num_users(self) -> int:
        return self.H.shape[1]

    @property
    def num_antennas(self) -> int:
        return self.H.shape[0]


@dataclass(frozen=True)
class LinkMetrics:
    """Per-user rates (nats), per-user MMSE and reported SNRs."""

    rates: np.ndarray          # R_q, indexed by original user
    sum_rate: float            # log det(I + H P H^H C_z^-1)
    sum_rate_single_log: float  # log(1 + sum_q p_q h_q^H C_z^-1 h_q), diagnostic
    mus: np.ndarray            # mu_q = exp(-R_q)
    snr_db: float              # 10 log10(sum_q p_q ||h_q||^2 / trace C_z)
    snr_eff_db: float          # effective SNR from the mean MMSE, see report_snr_eff


def _interference_matrix(state: ChannelState, position: int) -> np.ndarray:
    X = state.C_z.copy()
    for j in state.order[position + 1:]:
        hj = state.H[:, j]
        X += state.p[j] * np.outer(hj, hj.conj())
    return X


def _quadratic_form(state: ChannelState, q: int) -> float:
    pos = int(np.where(state.order == q)[0][0])
    X = _interference_matrix(state, pos)
    hq = state.H[:, q]
    try:
        y = np.linalg.solve(X, hq)
    except np.linalg.LinAlgError as exc:
        raise SingularNoiseError(
            f"interference-plus-noise matrix for user {q} is singular") from exc
    return float(np.real(state.p[q] * hq.conj() @ y))


def user_rate(q: int, state: ChannelState) -> float:
    """R_q = log(1 + p_q h_q^H X_q^-1 h_q) in nats, with X_q the covariance
    of not-yet-decoded users plus noise."""
    return float(np.log1p(_quadratic_form(state, q)))


def mmse(q: int, state: ChannelState) -> float:
    """mu_q = (1 + p_q h_q^H X_q^-1 h_q)^-1 = exp(-R_q)."""
    return 1.0 / (1.0 + _quadratic_form(state, q))


def sum_rate(state: ChannelState) -> tuple[float, float]:
    """(log det form, single-log diagnostic form).

    The log-det expression is authoritative: it equals the telescoped sum of
    the SIC per-user rates and is the quantity the worst-case designs
    minimize. The single-log closed form is retained as a diagnostic only;
    the two disagree for Q > 1 in general.
    """
    H, p, C = state.H, state.p, state.C_z
    A = (H * p[None, :]) @ H.conj().T
    try:
        M = np.linalg.solve(C, A)
    except np.linalg.LinAlgError as exc:
        raise SingularNoiseError("singular noise covariance") from exc
    sign, logdet = np.linalg.slogdet(np.eye(C.shape[0]) + M)
    if sign <= 0:
        raise SingularNoiseError("log det argument not positive definite")
    try:
        Y = np.linalg.solve(C, H)
    except np.linalg.LinAlgError as exc:
        raise SingularNoiseError("singular noise covariance") from exc
    single = float(np.log1p(np.real(np.sum(p * np.einsum("iq,iq->q", H.conj(), Y)))))
    return float(logdet), single


def report_snr(state: ChannelState) -> float:
    """Nominal SNR: 10 log10(sum_q p_q ||h_q||^2 / trace(C_z)).

    This convention is invariant across noise designs of equal total power;
    regime-dependent link quality shows up in report_snr_eff instead.
    """
    tr = float(np.real(np.trace(state.C_z)))
    if tr <= 0:
        raise ValueError("noise covariance has zero trace")
    sig = float(np.sum(state.p * np.sum(np.abs(state.H) ** 2, axis=0)))
    return 10.0 * np.log10(sig / tr)


def report_snr_eff(state: ChannelState) -> float:
    """Effective SNR implied by the mean per-user MMSE: with mu_bar the mean
    of mu_q, returns 10 log10((1 - mu_bar) / mu_bar), i.e. the post-SIC
    SINR of a user whose MMSE equals the average."""
    mus = np.array([mmse(q, state) for q in range(state.num_users)])
    mu_bar = float(mus.mean())
    mu_bar = min(max(mu_bar, 1e-300), 1.0 - 1e-15)
    return 10.0 * np.log10((1.0 - mu_bar) / mu_bar)


def link_metrics(state: ChannelState) -> LinkMetrics:
    qf = np.array([_quadratic_form(state, q) for q in range(state.num_users)])
    rates = np.log1p(qf)
    mus = 1.0 / (1.0 + qf)
    logdet, single = sum_rate(state)
    mu_bar = float(np.clip(mus.mean(), 1e-300, 1.0 - 1e-15))
    return LinkMetrics(
        rates=rates,
        sum_rate=logdet,
        sum_rate_single_log=single,
        mus=mus,
        snr_db=report_snr(state),
        snr_eff_db=10.0 * np.log10((1.0 - mu_bar) / mu_bar),
    )
