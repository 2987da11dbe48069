"""Worst-case noise covariance design.

Closed-form solvers for the two saddle-point attacks (minimize the sum rate;
minimize the strongest user's rate) with users transmitting at their power
caps, the isotropic benign benchmark, and an independent projected-gradient
oracle used to certify the closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelState, sic_order, sum_rate, user_rate

# Eigenvalue floor for returned covariances, as a fraction of P_N / N_R.
# Large enough that rate computations against the design stay conditioned to
# ~1e-10 (the spec-level identity tolerances are 1e-9), small enough that the
# diverted noise budget shifts the attack objectives by only ~1e-5 relative.
EIG_FLOOR_FRACTION = 1e-5


class BisectionError(ValueError):
    """Raised when the bracketing interval does not contain a sign change."""


@dataclass(frozen=True)
class NoiseDesign:
    kind: str                   # ideal | worst_sum_rate | worst_strongest_user
    C_z: np.ndarray             # Hermitian PSD, trace <= P_N
    nu: float = 0.0             # bisection multiplier (sum-rate design only)
    delta_reg: float = 0.0      # isotropic mixing weight (strongest-user design)
    achieved_objective: float = float("nan")  # rate value at the design

    def __post_init__(self):
        C = np.asarray(self.C_z, dtype=np.complex128)
        herm = np.max(np.abs(C - C.conj().T))
        if herm > 1e-12 * max(1.0, float(np.abs(C).max())):
            raise ValueError("noise covariance is not Hermitian")
        ev = np.linalg.eigvalsh(C)
        if ev.min() < -1e-12 * max(1.0, ev.max()):
            raise ValueError("noise covariance is not positive semidefinite")
        object.__setattr__(self, "C_z", C)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.C_z)

    def summary(self) -> dict:
        """Serializable record of the design (for experiment outputs)."""
        return {
            "kind": self.kind,
            "nu": self.nu,
            "delta_reg": self.delta_reg,
            "achieved_objective": self.achieved_objective,
            "eigenvalues": [float(v) for v in self.eigenvalues()],
        }


def bisect(f, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Root of a monotone function by bisection; the interval must bracket."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise BisectionError(f"f({lo}) = {flo} and f({hi}) = {fhi} do not bracket a root")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ideal_covariance(P_N: float, N_R: int) -> NoiseDesign:
    """Benign benchmark: isotropic noise at full budget."""
    if P_N <= 0:
        raise ValueError("P_N must be positive")
    C = (P_N / N_R) * np.eye(N_R, dtype=np.complex128)
    return NoiseDesign(kind="ideal", C_z=C)


def _signal_gram(H, P_caps):
    H = np.asarray(H, dtype=np.complex128)
    p = np.asarray(P_caps, dtype=np.float64)
    A = (H * p[None, :]) @ H.conj().T
    return 0.5 * (A + A.conj().T)


def _as_state(H, P_caps, P_N, C_z) -> ChannelState:
    H = np.asarray(H, dtype=np.complex128)
    p = np.asarray(P_caps, dtype=np.float64)
    return ChannelState(H=H, p=p, P_max=p, C_z=C_z, P_N=P_N,
                        positions=np.full(H.shape[1], 100.0))


def waterfill_eigenvalue(upsilon: float, nu: float) -> float:
    """sigma(upsilon, nu) = (upsilon/2) (sqrt(1 + 4/(upsilon nu)) - 1),
    the stationarity solution for one eigendirection; decreasing in nu."""
    if upsilon <= 0.0:
        return 0.0
    return upsilon / 2.0 * (np.sqrt(1.0 + 4.0 / (upsilon * nu)) - 1.0)


def solve_p1(H, P_caps, P_N: float, tol: float = 1e-12) -> NoiseDesign:
    """Sum-rate attack: noise shares the eigenbasis of H P H^H, with
    eigenvalues from the closed-form water-filling shape and the multiplier
    nu bisected so the full budget P_N is spent."""
    if P_N <= 0:
        raise ValueError("P_N must be positive")
    A = _signal_gram(H, P_caps)
    n_r = A.shape[0]
    ev, U = np.linalg.eigh(A)
    ev = np.clip(ev, 0.0, None)
    if ev.max() <= 0.0:
        raise ValueError("all-zero channel: the attack objective is degenerate")
    pos = ev > ev.max() * 1e-14

    def budget_gap(nu):
        return sum(waterfill_eigenvalue(v, nu) for v in ev[pos]) - P_N

    hi = 1.0
    while budget_gap(hi) > 0:
        hi *= 2.0
    lo = hi
    while budget_gap(lo) < 0:
        lo /= 2.0
    nu = bisect(budget_gap, lo, hi, tol=tol * max(lo, 1.0))

    sigma = np.array([waterfill_eigenvalue(v, nu) if keep else 0.0
                      for v, keep in zip(ev, pos)])
    floor = EIG_FLOOR_FRACTION * P_N / n_r
    sigma = np.maximum(sigma, floor)
    sigma *= P_N / sigma.sum()
    C = (U * sigma[None, :]) @ U.conj().T
    C = 0.5 * (C + C.conj().T)
    objective, _ = sum_rate(_as_state(H, P_caps, P_N, C))
    return NoiseDesign(kind="worst_sum_rate", C_z=C, nu=float(nu),
                       achieved_objective=objective)


def solve_p2(H, P_caps, P_N: float, delta_reg: float = 1e-3) -> NoiseDesign:
    """Strongest-user attack: align the noise covariance with the channel of
    the last user in SIC order, mixed with a small isotropic component so the
    covariance stays invertible."""
    if not 0.0 < delta_reg <= 0.1:
        raise ValueError("delta_reg must lie in (0, 0.1]")
    if P_N <= 0:
        raise ValueError("P_N must be positive")
    H = np.asarray(H, dtype=np.complex128)
    p = np.asarray(P_caps, dtype=np.float64)
    n_r = H.shape[0]
    order = sic_order(H, p)
    strongest = int(order[-1])
    hq = H[:, strongest]
    nsq = float(np.real(hq.conj() @ hq))
    if nsq <= 0.0:
        raise ValueError("strongest user has a zero channel vector")
    C = (1.0 - delta_reg) * P_N * np.outer(hq, hq.conj()) / nsq \
        + delta_reg * (P_N / n_r) * np.eye(n_r, dtype=np.complex128)
    C = 0.5 * (C + C.conj().T)
    state = _as_state(H, p, P_N, C)
    objective = user_rate(strongest, state)
    return NoiseDesign(kind="worst_strongest_user", C_z=C, delta_reg=delta_reg,
                       achieved_objective=objective)


# ---------------------------------------------------------------------------
# Independent numerical oracle: projected (mirror) gradient descent on the
# covariance. The update is multiplicative in the spectrum (exponentiated
# gradient): an additive step followed by trace rescaling stalls at points
# where the gradient is parallel to the iterate, which is not a KKT point;
# the multiplicative step has exactly the KKT points as fixed points and
# keeps every iterate strictly positive definite.
# ---------------------------------------------------------------------------

def oracle_min_covariance(H, P_caps, P_N: float, objective: str = "sum_rate",
                          iters: int = 800, step: float | None = None,
                          init: np.ndarray | None = None) -> NoiseDesign:
    """Minimize the chosen rate objective over {C | C = C^H, C >= 0,
    trace(C) <= P_N} by projected gradient descent with backtracking and
    multiplicative spectral updates; returns the best iterate.

    Deliberately independent of the closed forms: it sees only the objective
    and its gradient. Small dimensions only.
    """
    H = np.asarray(H, dtype=np.complex128)
    p = np.asarray(P_caps, dtype=np.float64)
    n_r = H.shape[0]
    if n_r > 8:
        raise ValueError("oracle is restricted to N_R <= 8")
    if objective not in ("sum_rate", "strongest_user"):
        raise ValueError(f"unknown objective {objective!r}")
    A = _signal_gram(H, p)
    strongest = int(sic_order(H, p)[-1])
    hs = H[:, strongest]
    ps = p[strongest]
    # the oracle's own evaluation floor sits well above the closed forms'
    # regularization floor: log-determinants at the tiny floor would amplify
    # absolute eigenvalue noise into spurious objective improvements
    floor = 1e-9 * P_N / n_r

    def _inv_and_logdet(C):
        ev, U = np.linalg.eigh(C)
        ev = np.maximum(ev, floor)
        inv = (U / ev[None, :]) @ U.conj().T
        return inv, float(np.sum(np.log(ev)))

    def f_and_grad(C):
        if objective == "sum_rate":
            inv_ca, ld_ca = _inv_and_logdet(C + A)
            inv_c, ld_c = _inv_and_logdet(C)
            val = ld_ca - ld_c
            grad = inv_ca - inv_c
        else:
            inv_c, _ = _inv_and_logdet(C)
            y = inv_c @ hs
            s = max(float(np.real(ps * hs.conj() @ y)), 0.0)
            val = float(np.log1p(s))
            grad = -(ps / (1.0 + s)) * np.outer(y, y.conj())
        return val, 0.5 * (grad + grad.conj().T)

    def _step(C, grad, eta):
        ev, U = np.linalg.eigh(C)
        ev = np.maximum(ev, floor)
        L = (U * np.log(ev)[None, :]) @ U.conj().T - eta * grad
        L = 0.5 * (L + L.conj().T)
        ev2, U2 = np.linalg.eigh(L)
        ev2 = ev2 - ev2.max()  # rescaled away below; avoids overflow
        C_new = (U2 * np.exp(ev2)[None, :]) @ U2.conj().T
        C_new = P_N * C_new / float(np.real(np.trace(C_new)))
        return 0.5 * (C_new + C_new.conj().T)

    if init is not None:
        C = np.asarray(init, dtype=np.complex128)
        C = 0.5 * (C + C.conj().T)
        tr = float(np.real(np.trace(C)))
        if tr > P_N:
            C *= P_N / tr
    else:
        C = (P_N / n_r) * np.eye(n_r, dtype=np.complex128)
    eta0 = step if step is not None else P_N / n_r
    best_val, best_C = f_and_grad(C)[0], C.copy()
    if not np.isfinite(best_val):
        raise FloatingPointError("non-finite oracle objective at the start")
    eta = eta0
    for _ in range(iters):
        val, grad = f_and_grad(C)
        trial = eta
        val_new, C_new = val, C
        for _try in range(40):
            C_try = _step(C, grad, trial)
            val_try = f_and_grad(C_try)[0]
            if np.isfinite(val_try) and val_try <= val:
                val_new, C_new = val_try, C_try
                break
            trial *= 0.5
        C = C_new
        eta = min(trial * 2.0, eta0 * 100.0)
        if val_new < best_val:
            best_val, best_C = val_new, C.copy()
    return NoiseDesign(kind=f"oracle_{objective}", C_z=best_C,
                       achieved_objective=best_val)
