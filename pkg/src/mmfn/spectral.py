"""Perron-Frobenius eigenstructure of ``K(theta) = diag(theta . v) + Q``.

``gamma(theta)`` is the eigenvalue of maximal real part of ``K(theta)``.  It is
convex, vanishes at the origin and has gradient ``xi^T diag(v_k) h`` where
``xi`` and ``h`` are the left and right Perron vectors normalized by
``<xi, 1> = 1`` and ``<xi, h> = 1``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError
from .model import MmfnModel
from .traffic import stationary_background

__all__ = [
    "SpectralPoint",
    "TwistedGenerator",
    "k_matrix",
    "perron",
    "gamma",
    "gamma_gradient",
    "gamma_k",
    "twisted_generator",
    "twisted_model",
    "gamma_batch",
    "spectral_batch",
    "SpectralEvaluator",
]

DENSE_LIMIT = 64
GAP_ERROR = 1e-12
GAP_WARN = 1e-8


@dataclass(frozen=True, eq=False)
class SpectralPoint:
    theta: np.ndarray
    gamma: float
    h: np.ndarray
    xi: np.ndarray
    grad: np.ndarray
    gap: float
    residual: float  # max of right and left eigen-residuals, sup norm

    @property
    def small_gap(self) -> bool:
        return self.gap < GAP_WARN


@dataclass(frozen=True, eq=False)
class TwistedGenerator:
    theta: np.ndarray
    Q_theta: np.ndarray
    pi_theta: np.ndarray
    v_bar_theta: np.ndarray
    diagonal_mismatch: float  # |formula diagonal - (-sum of off-diagonals)|
    drift_mismatch: float  # |v_bar_theta - grad gamma(theta)|


def _theta(model: MmfnModel, theta) -> np.ndarray:
    theta = np.array(theta, dtype=float)  # private copy: it is frozen below
    if theta.shape != (model.d,):
        raise ValueError(f"theta must have shape ({model.d},), got {theta.shape}")
    return theta


def k_matrix(model: MmfnModel, theta) -> np.ndarray:
    theta = _theta(model, theta)
    return np.diag(theta @ model.v) + model.Q


def _positive(vec: np.ndarray) -> np.ndarray:
    vec = np.real(vec)
    vec = vec * np.sign(vec[np.argmax(np.abs(vec))])
    tiny = 1e-12 * np.abs(vec).max()
    if (vec < -tiny).any():
        raise NumericalError("Perron vector has entries of both signs")
    return np.abs(vec)


def _normalize(h: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xi = xi / xi.sum()
    h = h / (xi @ h)
    return h, xi


def _power_perron(K: np.ndarray, tol: float = 1e-14, max_iter: int = 200000):
    """Shifted power iteration for large m: K + sI is nonnegative and primitive."""
    m = K.shape[0]
    s = -np.diag(K).min() + 1.0
    A = K + s * np.eye(m)
    out = []
    for M in (A, A.T):
        x = np.full(m, 1.0 / m)
        lam = 0.0
        for _ in range(max_iter):
            y = M @ x
            lam_new = y.sum() / x.sum()
            y /= y.sum()
            if np.abs(y - x).max() <= tol and abs(lam_new - lam) <= tol * abs(lam_new):
                x = y
                lam = lam_new
                break
            x, lam = y, lam_new
        else:
            raise NumericalError("power iteration for the Perron vector did not converge")
        out.append((lam - s, x))
    (g, h), (_, xi) = out
    # Rayleigh-type refinement of the eigenvalue
    g = float(xi @ K @ h / (xi @ h))
    ev = np.linalg.eigvals(K) if m <= 512 else None
    if ev is not None:
        re = np.sort(ev.real)[::-1]
        gap = float(re[0] - re[1])
    else:
        gap = np.inf
    return g, h, xi, gap


def perron(model: MmfnModel, theta) -> SpectralPoint:
    """Perron eigenpair of ``K(theta)`` with the normalization ``<xi,1> = <xi,h> = 1``."""
    theta = _theta(model, theta)
    K = np.diag(theta @ model.v) + model.Q
    m = model.m
    if m <= DENSE_LIMIT:
        w, vl, vr = scipy.linalg.eig(K, left=True, right=True)
        order = np.argsort(w.real)[::-1]
        top = order[0]
        gap = float(w.real[top] - w.real[order[1]])
        if gap < GAP_ERROR:
            raise NumericalError(f"degenerate spectral gap {gap:.3g} at theta={theta.tolist()}")
        g = float(w.real[top])
        h = _positive(vr[:, top])
        xi = _positive(vl[:, top])
    else:
        g, h, xi, gap = _power_perron(K)
        if gap < GAP_ERROR:
            raise NumericalError(f"degenerate spectral gap {gap:.3g} at theta={theta.tolist()}")
    h, xi = _normalize(h, xi)
    res = max(np.abs(K @ h - g * h).max() / np.abs(h).max(),
              np.abs(xi @ K - g * xi).max() / np.abs(xi).max())
    grad = model.v @ (xi * h)
    for a in (theta, h, xi, grad):
        a.flags.writeable = False
    return SpectralPoint(theta=theta, gamma=g, h=h, xi=xi, grad=grad, gap=gap, residual=float(res))


def gamma(model: MmfnModel, theta) -> float:
    """Perron eigenvalue only (cheaper than :func:`perron`)."""
    theta = _theta(model, theta)
    if model.m > DENSE_LIMIT:
        return perron(model, theta).gamma
    K = np.diag(theta @ model.v) + model.Q
    return float(np.linalg.eigvals(K).real.max())


def gamma_gradient(model: MmfnModel, theta) -> np.ndarray:
    return perron(model, theta).grad


def gamma_k(model: MmfnModel, theta) -> np.ndarray:
    """The linear forms ``gamma_k(theta) = [theta^T R]_k``; accepts a stack of thetas."""
    return np.asarray(theta, dtype=float) @ model.R


def twisted_generator(model: MmfnModel, theta) -> TwistedGenerator:
    """Generator ``q^theta_ij = q_ij h(j) / h(i)`` of the background under the twisted measure.

    The diagonal is stored as minus the sum of the off-diagonals so that rows
    sum to zero exactly; its distance from ``theta . v(i) + q_ii - gamma`` is
    reported as a diagnostic.
    """
    sp = perron(model, theta)
    Q = model.Q
    h = sp.h
    Qt = Q * h[None, :] / h[:, None]
    np.fill_diagonal(Qt, 0.0)
    diag = -Qt.sum(axis=1)
    formula = sp.theta @ model.v + np.diag(Q) - sp.gamma
    np.fill_diagonal(Qt, diag)
    pi_t = stationary_background(Qt)
    vbar = model.v @ pi_t
    for a in (Qt, pi_t, vbar):
        a.flags.writeable = False
    return TwistedGenerator(
        theta=sp.theta,
        Q_theta=Qt,
        pi_theta=pi_t,
        v_bar_theta=vbar,
        diagonal_mismatch=float(np.abs(diag - formula).max()),
        drift_mismatch=float(np.abs(vbar - sp.grad).max()),
    )


def twisted_model(model: MmfnModel, theta) -> MmfnModel:
    """Same rates and routing, background generator replaced by ``Q^theta``."""
    return model.with_generator(twisted_generator(model, theta).Q_theta)


def _k_stack(model: MmfnModel, thetas: np.ndarray) -> np.ndarray:
    diag = thetas @ model.v
    K = np.broadcast_to(model.Q, diag.shape + (model.m,)).copy()
    idx = np.arange(model.m)
    K[..., idx, idx] += diag
    return K


def gamma_batch(model: MmfnModel, thetas, chunk: int = 65536) -> np.ndarray:
    """``gamma`` at every row of ``thetas`` (shape ``(..., d)``)."""
    thetas = np.asarray(thetas, dtype=float)
    flat = thetas.reshape(-1, model.d)
    out = np.empty(flat.shape[0])
    if model.m == 2:
        # closed form for 2x2 real matrices with real spectrum
        diag = flat @ model.v
        a = diag[:, 0] + model.Q[0, 0]
        b = diag[:, 1] + model.Q[1, 1]
        disc = np.sqrt(0.25 * (a - b) ** 2 + model.Q[0, 1] * model.Q[1, 0])
        out[:] = 0.5 * (a + b) + disc
        return out.reshape(thetas.shape[:-1])
    for s in range(0, flat.shape[0], chunk):
        K = _k_stack(model, flat[s:s + chunk])
        out[s:s + chunk] = np.linalg.eigvals(K).real.max(axis=-1)
    return out.reshape(thetas.shape[:-1])


def spectral_batch(model: MmfnModel, thetas, chunk: int = 32768) -> tuple[np.ndarray, np.ndarray]:
    """``gamma`` and its gradient at every row of ``thetas``."""
    thetas = np.asarray(thetas, dtype=float)
    flat = thetas.reshape(-1, model.d)
    n = flat.shape[0]
    g = np.empty(n)
    grad = np.empty((n, model.d))
    if model.m == 2:
        # closed form: h ~ (q12, gamma - a) and xi ~ (q21, gamma - a)
        diag = flat @ model.v
        a = diag[:, 0] + model.Q[0, 0]
        b = diag[:, 1] + model.Q[1, 1]
        q = model.Q[0, 1] * model.Q[1, 0]
        disc = np.sqrt(0.25 * (a - b) ** 2 + q)
        g[:] = 0.5 * (a + b) + disc
        # gamma - a written without cancellation
        ga = np.where(b >= a, (b - a) + (disc - 0.5 * (b - a)), q / (disc + 0.5 * (a - b)))
        w1 = q / (q + ga ** 2)
        w = np.stack([w1, 1.0 - w1], axis=1)
        grad[:] = w @ model.v.T
        return g.reshape(thetas.shape[:-1]), grad.reshape(thetas.shape)
    for s in range(0, n, chunk):
        K = _k_stack(model, flat[s:s + chunk])
        w, vr = np.linalg.eig(K)
        wl, vl = np.linalg.eig(np.swapaxes(K, -1, -2))
        i = np.argmax(w.real, axis=-1)
        j = np.argmax(wl.real, axis=-1)
        rows = np.arange(K.shape[0])
        h = np.abs(vr[rows, :, i].real)
        xi = np.abs(vl[rows, :, j].real)
        xi /= xi.sum(axis=1, keepdims=True)
        h /= np.einsum("ni,ni->n", xi, h)[:, None]
        g[s:s + chunk] = w.real[rows, i]
        grad[s:s + chunk] = (xi * h) @ model.v.T
    return g.reshape(thetas.shape[:-1]), grad.reshape(thetas.shape)


class SpectralEvaluator:
    """Memoized :func:`perron` keyed by the exact bytes of theta.

    Reads proceed without the lock; inserts take it, so concurrent callers
    never observe a half-built entry.
    """

    def __init__(self, model: MmfnModel, max_entries: int = 100000):
        self.model = model
        self.max_entries = max_entries
        self._cache: dict[bytes, SpectralPoint] = {}
        self._lock = threading.Lock()

    def __call__(self, theta) -> SpectralPoint:
        theta = _theta(self.model, theta)
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        sp = perron(self.model, theta)
        with self._lock:
            if len(self._cache) >= self.max_entries:
                self._cache.clear()
            return self._cache.setdefault(key, sp)

    def gamma(self, theta) -> float:
        return self(theta).gamma

    def __len__(self) -> int:
        return len(self._cache)
