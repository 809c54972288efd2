"""Traffic equations, background stationary law and stability tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ModelStructureError
from .model import MmfnModel

__all__ = [
    "TrafficSolution",
    "StabilityReport",
    "StationVerdict",
    "stationary_background",
    "linear_traffic",
    "nonlinear_traffic",
    "capped_flow",
    "solve_traffic",
    "is_stable",
    "stable_stations",
]

# relative tolerance for strict sign tests on drifts
STRICT_TOL = 1e-12


def stationary_background(Q) -> np.ndarray:
    """Stationary distribution of an irreducible generator.

    Uses the GTH elimination scheme, which involves no subtractions and so
    keeps every entry of pi positive and accurate to machine precision.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ModelStructureError(f"generator must be square, got shape {Q.shape}")
    m = Q.shape[0]
    off = Q - np.diag(np.diag(Q))
    scale = max(np.abs(Q).max(), 1.0)
    if (off < 0).any() or np.abs(Q.sum(axis=1)).max() > 1e-10 * scale * m:
        raise ModelStructureError("not a generator: need nonnegative off-diagonals and zero row sums")
    A = off.copy()
    for n in range(m - 1, 0, -1):
        s = A[n, :n].sum()
        if s <= 0:
            raise ModelStructureError("generator is reducible: stationary law is not unique")
        A[:n, n] /= s
        A[:n, :n] += np.outer(A[:n, n], A[n, :n])
    pi = np.zeros(m)
    pi[0] = 1.0
    for n in range(1, m):
        pi[n] = pi[:n] @ A[:n, n]
    pi /= pi.sum()
    return pi


def linear_traffic(model: MmfnModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-state solution of ``alpha = lam + P^T alpha`` and its pi-average."""
    alpha = np.linalg.solve(model.R, model.lam)
    pi = stationary_background(model.Q)
    return alpha, alpha @ pi


def capped_flow(lam_i: np.ndarray, mu_i: np.ndarray, P: np.ndarray, capped: np.ndarray,
                start=None, tol: float = 1e-12, max_iter: int = 10**6) -> np.ndarray:
    """Maximal fixed point of ``b = min(mu, lam + P^T b)`` on ``capped`` coordinates.

    Coordinates outside ``capped`` are pinned at ``mu``.  The fixed point is
    reached by monotone descent from ``start`` (default ``mu``) and then
    polished exactly: once the set of coordinates where the cap binds is
    stable, one linear solve gives the fixed point to rounding error.
    """
    d = lam_i.shape[0]
    capped = np.asarray(capped, dtype=bool)
    b = mu_i.copy() if start is None else np.minimum(np.asarray(start, dtype=float), mu_i)
    Pt = P.T
    scale = max(np.abs(mu_i).max(), np.abs(lam_i).max(), 1e-300)
    eye = np.eye(d)
    last_binding = None
    for it in range(max_iter):
        a = lam_i + Pt @ b
        new = np.where(capped, np.minimum(mu_i, a), mu_i)
        change = np.abs(new - b).max()
        b = new
        if change <= tol * scale:
            break
        # exact solve on the current binding pattern
        free = capped & (a < mu_i)
        key = free.tobytes()
        if key != last_binding:
            last_binding = key
            rhs = np.where(free, lam_i + Pt[:, ~free] @ mu_i[~free], mu_i)
            M = np.where(free[:, None], eye - Pt * free[None, :], eye)
            try:
                cand = np.linalg.solve(M, rhs)
            except np.linalg.LinAlgError:
                continue
            a_c = lam_i + Pt @ cand
            fixed = np.where(capped, np.minimum(mu_i, a_c), mu_i)
            # the fixed point is unique (the map is a P^T-contraction), so any
            # verified fixed point is the answer
            if np.abs(fixed - cand).max() <= tol * scale:
                b = cand
                break
    else:
        raise ConvergenceError("capped flow iteration did not converge", residual=float(change))
    return b


def nonlinear_traffic(model: MmfnModel) -> np.ndarray:
    """Maximal solution of ``alpha_k = lam_k + sum_l min(alpha_l, mu_l) p_lk`` per state."""
    alpha_lin, _ = linear_traffic(model)
    d, m = model.d, model.m
    out = np.empty((d, m))
    allc = np.ones(d, dtype=bool)
    for i in range(m):
        # b = min(alpha, mu) solves the capped flow equation
        b = capped_flow(model.lam[:, i], model.mu[:, i], model.P, allc,
                        start=np.minimum(alpha_lin[:, i], model.mu[:, i]))
        out[:, i] = model.lam[:, i] + model.P.T @ b
    return np.minimum(out, alpha_lin)


@dataclass(frozen=True)
class TrafficSolution:
    alpha: np.ndarray
    alpha_star: np.ndarray
    pi: np.ndarray
    alpha_bar: np.ndarray
    alpha_star_bar: np.ndarray
    lambda_bar: np.ndarray
    mu_bar: np.ndarray
    v_bar: np.ndarray


def solve_traffic(model: MmfnModel) -> TrafficSolution:
    pi = stationary_background(model.Q)
    alpha = np.linalg.solve(model.R, model.lam)
    alpha_star = nonlinear_traffic(model)
    return TrafficSolution(
        alpha=alpha,
        alpha_star=alpha_star,
        pi=pi,
        alpha_bar=alpha @ pi,
        alpha_star_bar=alpha_star @ pi,
        lambda_bar=model.lam @ pi,
        mu_bar=model.mu @ pi,
        v_bar=model.v @ pi,
    )


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    marginal: bool
    drift: np.ndarray  # R^{-1} v_bar
    alpha_minus_mu: np.ndarray
    agreement: float
    traffic: TrafficSolution

    def to_dict(self) -> dict:
        t = self.traffic
        return {
            "stable": self.stable,
            "marginal": self.marginal,
            "pi": t.pi.tolist(),
            "v_bar": t.v_bar.tolist(),
            "drift": self.drift.tolist(),
            "alpha_bar": t.alpha_bar.tolist(),
            "mu_bar": t.mu_bar.tolist(),
            "alpha_minus_mu": self.alpha_minus_mu.tolist(),
            "agreement": self.agreement,
        }


def is_stable(model: MmfnModel) -> StabilityReport:
    """Global stability test ``R^{-1} v_bar < 0``.

    The equivalent form ``alpha_bar - mu_bar < 0`` is computed independently
    and the two must agree to 1e-10.  Drifts within ``1e-12 * scale`` of zero
    make the model marginal, which counts as not stable.
    """
    t = solve_traffic(model)
    drift = model.R_inv @ t.v_bar
    gap = t.alpha_bar - t.mu_bar
    agreement = float(np.abs(drift - gap).max())
    scale = model.rate_scale
    if agreement > 1e-10 * max(scale, 1.0):
        raise AssertionError(f"stability tests disagree by {agreement:.3g}")
    stable = bool((drift < -STRICT_TOL * scale).all())
    marginal = bool(not stable and (drift <= STRICT_TOL * scale).all())
    return StabilityReport(stable, marginal, drift, gap, agreement, t)


@dataclass(frozen=True)
class StationVerdict:
    station: int  # 1-based
    stable: bool
    gap: float  # alpha*_bar_k - mu_bar_k


def stable_stations(model: MmfnModel) -> tuple[set, list]:
    """Stations with ``alpha*_bar_k < mu_bar_k`` under the maximal nonlinear solution.

    Returns the 1-based set of stable stations and a verdict per station.
    A station with a nonnegative gap is reported, not claimed transient.
    """
    t = solve_traffic(model)
    gaps = t.alpha_star_bar - t.mu_bar
    scale = model.rate_scale
    verdicts = [StationVerdict(k + 1, bool(g < -STRICT_TOL * scale), float(g)) for k, g in enumerate(gaps)]
    return {v.station for v in verdicts if v.stable}, verdicts
