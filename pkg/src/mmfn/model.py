"""Static parameters of a Markov-modulated fluid network and their validation.

A network has ``d`` buffers (stations) and a background Markov chain with
``m`` states.  In background state ``i`` station ``k`` receives exogenous fluid
at rate ``lam[k, i]`` and can release at most ``mu[k, i]``; a fraction
``P[k, l]`` of released fluid is routed to station ``l`` and the rest leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ModelStructureError, NumericalError

__all__ = [
    "MmfnModel",
    "DerivedModel",
    "Check",
    "ValidationReport",
    "validate_model",
    "derive",
    "augmented_routing",
    "spectral_radius",
]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MmfnModel:
    """Model primitives.

    Parameters
    ----------
    lam, mu : array_like, shape (d, m)
        Exogenous input rates and potential release rates per station and
        background state.
    P : array_like, shape (d, d)
        Routing fractions ``P[k, l]`` from station ``k`` to station ``l``.
    Q : array_like, shape (m, m)
        Generator of the background chain.

    Only shapes and finiteness are checked here; the model invariants are
    checked by :func:`validate_model`.
    """

    lam: np.ndarray
    mu: np.ndarray
    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        for name in ("lam", "mu", "P", "Q"):
            try:
                arr = _frozen(getattr(self, name))
            except (TypeError, ValueError) as exc:
                raise ModelStructureError(f"{name}: not a numeric array ({exc})") from None
            if arr.ndim != 2:
                raise ModelStructureError(f"{name}: expected a 2-d array, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelStructureError(f"{name}: entries must be finite")
            object.__setattr__(self, name, arr)
        d, m = self.lam.shape
        if self.mu.shape != (d, m):
            raise ModelStructureError(f"mu has shape {self.mu.shape}, expected {(d, m)}")
        if self.P.shape != (d, d):
            raise ModelStructureError(f"P has shape {self.P.shape}, expected {(d, d)}")
        if self.Q.shape != (m, m):
            raise ModelStructureError(f"Q has shape {self.Q.shape}, expected {(m, m)}")

    @property
    def d(self) -> int:
        return self.lam.shape[0]

    @property
    def m(self) -> int:
        return self.lam.shape[1]

    @cached_property
    def derived(self) -> "DerivedModel":
        return derive(self)

    @property
    def R(self) -> np.ndarray:
        return self.derived.R

    @property
    def R_inv(self) -> np.ndarray:
        return self.derived.R_inv

    @property
    def v(self) -> np.ndarray:
        return self.derived.v

    @cached_property
    def rate_scale(self) -> float:
        """Largest rate magnitude in the model, used to scale tolerances."""
        return float(max(np.abs(self.lam).max(), np.abs(self.mu).max(), np.abs(self.v).max(), 1e-300))

    def with_generator(self, Q) -> "MmfnModel":
        return MmfnModel(self.lam, self.mu, self.P, Q)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "m": self.m,
            "lambda": self.lam.tolist(),
            "mu": self.mu.tolist(),
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
        }


@dataclass(frozen=True, eq=False)
class DerivedModel:
    """Reflection matrix ``R = I - P^T``, its inverse and net flow rates ``v``."""

    R: np.ndarray
    R_inv: np.ndarray
    v: np.ndarray
    inverse_residual: float


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""
    witness: object = None


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail, "witness": c.witness}
                for c in self.checks
            ],
        }


def spectral_radius(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _strong_components(support: np.ndarray) -> list[list[int]]:
    n, labels = connected_components(support.astype(np.int8), directed=True, connection="strong")
    return [sorted(np.flatnonzero(labels == c).tolist()) for c in range(n)]


def _closed_classes(support: np.ndarray, comps: list[list[int]]) -> list[list[int]]:
    """Communicating classes that cannot be left."""
    closed = []
    for comp in comps:
        inside = np.zeros(support.shape[0], dtype=bool)
        inside[comp] = True
        if not support[np.ix_(comp, ~inside)].any():
            closed.append(comp)
    return closed


def validate_model(model: MmfnModel, tol: float = 1e-12) -> ValidationReport:
    """Check every model invariant and return a pass/fail report.

    Shape errors are raised by :class:`MmfnModel` itself, so they surface
    before any invariant is examined.  Indices in witnesses are 1-based.
    """
    d, m = model.d, model.m
    lam, mu, P, Q = model.lam, model.mu, model.P, model.Q
    checks = []

    checks.append(Check("station_count", d >= 2, f"d = {d} (need d >= 2)"))
    checks.append(Check("background_count", m >= 2, f"m = {m} (need m >= 2)"))

    neg = np.argwhere(np.minimum(lam, mu) < 0)
    checks.append(Check(
        "nonnegative_rates", neg.size == 0,
        "all input and release rates >= 0" if neg.size == 0 else "negative rate entries",
        [[int(k) + 1, int(i) + 1] for k, i in neg] or None,
    ))

    bad_entries = np.argwhere((P < 0) | (P > 1))
    row_sums = P.sum(axis=1)
    bad_rows = np.flatnonzero(row_sums > 1 + tol)
    checks.append(Check(
        "routing_entries", bad_entries.size == 0,
        "all routing fractions in [0, 1]",
        [[int(k) + 1, int(l) + 1] for k, l in bad_entries] or None,
    ))
    checks.append(Check(
        "routing_substochastic", bad_rows.size == 0,
        "row sums of P <= 1" if bad_rows.size == 0
        else "row sums " + ", ".join(f"{row_sums[k]:.6g} (station {k + 1})" for k in bad_rows),
        [int(k) + 1 for k in bad_rows] or None,
    ))
    rho = spectral_radius(P)
    checks.append(Check("routing_transient", rho < 1 - 1e-10, f"spectral radius of P = {rho:.12g}"))

    off = Q - np.diag(np.diag(Q))
    neg_off = np.argwhere(off < 0)
    qscale = max(np.abs(Q).max(), 1.0)
    bad_q_rows = np.flatnonzero(np.abs(Q.sum(axis=1)) > tol * qscale * m)
    gen_ok = neg_off.size == 0 and bad_q_rows.size == 0
    detail = "nonnegative off-diagonals and zero row sums"
    if neg_off.size:
        detail = "negative off-diagonal entries"
    elif bad_q_rows.size:
        detail = "nonzero row sums in rows " + ", ".join(str(i + 1) for i in bad_q_rows)
    checks.append(Check("generator", gen_ok, detail,
                        ([[int(i) + 1, int(j) + 1] for i, j in neg_off] or
                         [int(i) + 1 for i in bad_q_rows]) or None))

    comps = _strong_components(off > 0)
    q_irred = len(comps) == 1
    if q_irred:
        checks.append(Check("background_irreducible", True, "Q is irreducible"))
    else:
        closed = _closed_classes(off > 0, comps)
        witness = [[i + 1 for i in c] for c in closed]
        desc = []
        for c in closed:
            if len(c) == 1:
                desc.append(f"state {c[0] + 1} absorbing")
            else:
                desc.append("closed class {" + ", ".join(str(i + 1) for i in c) + "}")
        checks.append(Check("background_irreducible", False,
                            "Q is reducible: " + "; ".join(desc), witness))

    if lam.sum() > 0 and bad_entries.size == 0:
        Pbar = augmented_routing(model)
        pcomps = _strong_components(Pbar > 0)
        if len(pcomps) == 1:
            checks.append(Check("network_irreducible", True, "augmented routing matrix is irreducible"))
        else:
            # node 0 is the outside world
            witness = [[i for i in c] for c in pcomps]
            checks.append(Check("network_irreducible", False,
                                "augmented routing matrix is reducible; components (0 = outside): "
                                + "; ".join("{" + ", ".join(map(str, c)) + "}" for c in witness),
                                witness))
    else:
        checks.append(Check("network_irreducible", False, "no exogenous input: augmented routing undefined"))

    return ValidationReport(tuple(checks))


def derive(model: MmfnModel) -> DerivedModel:
    """Reflection matrix, its inverse and net flow rates.

    ``v[k, i] = lam[k, i] + sum_l mu[l, i] P[l, k] - mu[k, i]``.
    """
    d = model.d
    R = np.eye(d) - model.P.T
    try:
        R_inv = np.linalg.inv(R)
    except np.linalg.LinAlgError:
        raise NumericalError("reflection matrix I - P^T is singular; routing is not transient") from None
    residual = float(np.abs(R @ R_inv - np.eye(d)).sum(axis=1).max())
    if residual > 1e-12:
        # one step of iterative refinement
        R_inv = R_inv + R_inv @ (np.eye(d) - R @ R_inv)
        residual = float(np.abs(R @ R_inv - np.eye(d)).sum(axis=1).max())
    if residual > 1e-12:
        raise NumericalError(f"inverse of R inaccurate: residual {residual:.3g}")
    v = model.lam + model.P.T @ model.mu - model.mu
    for a in (R, R_inv, v):
        a.flags.writeable = False
    return DerivedModel(R=R, R_inv=R_inv, v=v, inverse_residual=residual)


def augmented_routing(model: MmfnModel) -> np.ndarray:
    """The (d+1)x(d+1) routing matrix with the outside world as node 0."""
    lam_tot = model.lam.sum(axis=1)
    total = lam_tot.sum()
    if not total > 0:
        raise ValueError("augmented routing needs some positive exogenous input rate")
    d = model.d
    Pbar = np.zeros((d + 1, d + 1))
    Pbar[0, 1:] = lam_tot / total
    Pbar[1:, 1:] = model.P
    Pbar[1:, 0] = 1.0 - model.P.sum(axis=1)
    return Pbar
