"""Convex sets built from gamma, the domain fixed point and decay-rate bounds.

Sets are boolean lattices on a bounding box.  ``Gamma^-`` is ``{gamma < 0}``,
``Gamma^-_A`` adds ``gamma_k < 0`` for ``k`` in ``A`` and ``Gamma^+_A`` is
``{gamma > 0, gamma_k >= 0 for k in A}``.  Down-closure is taken on the
lattice: a point belongs to the down-closure of a set when some lattice point
that dominates it coordinatewise belongs to the set.
"""
from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, linprog, minimize, minimize_scalar

from .errors import ConvergenceError, DirectionOutsideCorn, NumericalError, PreconditionError
from .model import MmfnModel
from .spectral import gamma, gamma_batch, perron, spectral_batch
from .traffic import is_stable

__all__ = [
    "BoundingBox",
    "DomainGrid",
    "Membership",
    "UpperBound",
    "LowerBound",
    "TwoDExact",
    "classify",
    "auto_box",
    "fixed_point_iteration",
    "two_d_exact",
    "upper_decay_rate",
    "lower_decay_rate_coordinate",
    "lower_decay_rate_direction",
    "ray_root",
    "downclose",
    "write_grid_csv",
    "write_boundary_csv",
    "DecayReport",
    "decay_report",
    "bracket_verdict",
    "in_corn",
    "boundary_points",
]

BAND = 1e-12
MAX_POINTS = 2_000_000


def _band(model: MmfnModel, theta) -> np.ndarray:
    """Width of the boundary band at theta; absolute, scaled by rates and |theta|."""
    theta = np.asarray(theta, dtype=float)
    return BAND * model.rate_scale * np.maximum(1.0, np.abs(theta).max(axis=-1))


# ---------------------------------------------------------------------------
# pointwise classification


@dataclass(frozen=True)
class Membership:
    """Three-valued memberships: True, False, or None for the boundary band."""

    gamma: float
    gamma_minus: object
    gamma_plus: object
    gamma_minus_A: object
    gamma_plus_A: object


def _sign3(x: float, band: float):
    if x < -band:
        return -1
    if x > band:
        return 1
    return 0


def classify(model: MmfnModel, theta, A=()) -> Membership:
    """Memberships of theta in Gamma^-, Gamma^+, Gamma^-_A and Gamma^+_A.

    ``A`` holds 1-based station indices.  Points in the boundary band are
    reported as ``None`` for the strict sets, are excluded from Gamma^-_A
    and included in Gamma^+_A where the sign of gamma permits.
    """
    theta = np.asarray(theta, dtype=float)
    band = float(_band(model, theta))
    g = gamma(model, theta)
    gk = theta @ model.R
    idx = [k - 1 for k in A]
    sg = _sign3(g, band)
    s_k = [_sign3(gk[k], band) for k in idx]
    minus = None if sg == 0 else sg < 0
    plus = None if sg == 0 else sg > 0
    if sg > 0 or any(s > 0 for s in s_k):
        minus_A = False
    elif sg == 0:
        minus_A = None
    else:
        minus_A = all(s < 0 for s in s_k)  # band points on gamma_k are excluded
    if sg < 0 or any(s < 0 for s in s_k):
        plus_A = False
    elif sg == 0:
        plus_A = None
    else:
        plus_A = True  # band points on gamma_k are included
    return Membership(g, minus, plus, minus_A, plus_A)


# ---------------------------------------------------------------------------
# bounding box


@dataclass(frozen=True, eq=False)
class BoundingBox:
    lo: np.ndarray
    hi: np.ndarray
    steps: np.ndarray  # number of cells per axis
    truncated: tuple = ()  # 1-based axes whose extent exceeded the cap

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        steps = np.asarray(self.steps, dtype=int)
        if lo.shape != hi.shape or steps.shape != lo.shape:
            raise ValueError("lo, hi and steps must have the same length")
        if not (lo < hi).all():
            raise ValueError("need lo < hi on every axis")
        if (steps < 1).any():
            raise ValueError("need at least one cell per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "truncated", tuple(sorted(self.truncated)))

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    @property
    def resolution(self) -> np.ndarray:
        return (self.hi - self.lo) / self.steps

    @property
    def shape(self) -> tuple:
        return tuple(int(s) + 1 for s in self.steps)

    def axes(self) -> list:
        return [self.lo[k] + self.resolution[k] * np.arange(self.steps[k] + 1) for k in range(self.d)]

    def origin_index(self) -> tuple:
        return tuple(int(round(-self.lo[k] / self.resolution[k])) for k in range(self.d))

    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    @classmethod
    def aligned(cls, lo, hi, steps, truncated=()) -> "BoundingBox":
        """Box with ``lo <= 0 <= hi`` stretched so that the origin is a lattice point."""
        lo = np.minimum(np.asarray(lo, dtype=float), 0.0)
        hi = np.maximum(np.asarray(hi, dtype=float), 0.0)
        steps = np.broadcast_to(np.asarray(steps, dtype=int), lo.shape).copy()
        new_lo = np.empty_like(lo)
        new_hi = np.empty_like(hi)
        for k in range(lo.shape[0]):
            h = (hi[k] - lo[k]) / steps[k]
            n_neg = int(np.ceil(-lo[k] / h - 1e-9))
            n_pos = max(int(np.ceil(hi[k] / h - 1e-9)), 1)
            n_neg = max(n_neg, 1)
            steps[k] = n_neg + n_pos
            new_lo[k] = -n_neg * h
            new_hi[k] = n_pos * h
        return cls(new_lo, new_hi, steps, truncated)


def _default_steps(d: int) -> int:
    if d <= 2:
        return 200
    return max(int(MAX_POINTS ** (1.0 / d)) - 1, 8)


def ray_root(model: MmfnModel, c, u_max: float = 1e8) -> float:
    """First positive root of ``u -> gamma(u c)``; +inf if gamma stays negative.

    Returns 0 when the initial slope ``<v_bar, c>`` is nonnegative.
    """
    c = np.asarray(c, dtype=float)
    sp0 = perron(model, np.zeros(model.d))
    slope = float(sp0.grad @ c)
    if slope >= -BAND * model.rate_scale:
        return 0.0
    f = lambda u: gamma(model, u * c)
    # start from a point where gamma is safely negative
    lo = 1e-6 / model.rate_scale
    while f(lo) >= 0:
        lo *= 0.1
        if lo < 1e-300:
            return 0.0
    hi = lo
    while f(hi) < 0:
        lo = hi
        hi *= 2.0
        if hi > u_max:
            return np.inf
    return brentq(f, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def _recession_unbounded(model: MmfnModel, c, A_ub=None, nonneg: bool = False) -> bool:
    """True if ``{gamma <= 0, A_ub theta <= 0}`` is unbounded in direction ``c``.

    A direction ``u`` recedes from the set iff ``<u, v(i)> <= 0`` for every
    background state (the asymptotic slope of gamma along ``u`` is the
    largest such product) and ``A_ub u <= 0``.  With ``nonneg`` only
    directions ``u >= 0`` are considered.
    """
    d = model.d
    rows = [model.v.T]
    if A_ub is not None and len(A_ub):
        rows.append(np.asarray(A_ub, dtype=float))
    G = np.vstack(rows)
    res = linprog(-np.asarray(c, dtype=float), A_ub=G, b_ub=np.zeros(G.shape[0]),
                  bounds=[(0 if nonneg else -1, 1)] * d, method="highs")
    return bool(res.status == 0 and -res.fun > 1e-9)


def _support(model: MmfnModel, c, A_ub=None, b_ub=None, cap: float = 1e6, x0=None,
             nonneg: bool = False):
    """Maximize ``<c, theta>`` over ``{gamma <= 0, A_ub theta <= b_ub}`` by SLSQP.

    Returns the maximizer, or None when the problem is infeasible.
    """
    d = model.d
    c = np.asarray(c, dtype=float)
    cons = [{
        "type": "ineq",
        "fun": lambda th: -perron(model, th).gamma,
        "jac": lambda th: -perron(model, th).grad,
    }]
    if A_ub is not None and len(A_ub):
        A_ub = np.asarray(A_ub, dtype=float)
        b = np.zeros(A_ub.shape[0]) if b_ub is None else np.asarray(b_ub, dtype=float)
        cons.append({"type": "ineq", "fun": lambda th: b - A_ub @ th, "jac": lambda th: -A_ub})
    if x0 is None:
        vbar = perron(model, np.zeros(d)).grad
        x0 = -vbar / max(np.linalg.norm(vbar), 1e-300) * (1e-3 / model.rate_scale)
    with warnings.catch_warnings():
        # SLSQP clips steps to the bounds and says so
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(lambda th: -c @ th, x0, jac=lambda th: -c, constraints=cons,
                       bounds=[(0.0 if nonneg else -cap, cap)] * d, method="SLSQP",
                       options={"maxiter": 500, "ftol": 1e-14})
    x = res.x
    ok = perron(model, x).gamma <= 1e-8 * model.rate_scale * max(1.0, np.abs(x).max())
    if A_ub is not None and len(A_ub):
        ok = ok and (A_ub @ x <= b + 1e-8 * max(1.0, np.abs(x).max())).all()
    return x if ok else None


def auto_box(model: MmfnModel, steps=None, cap: float | None = None) -> BoundingBox:
    """Bounding box that brackets the part of Gamma^- relevant to the bounds.

    The upper end of axis ``k`` is the larger of twice the positive root of
    ``gamma(t e_k)`` and 1.25 times the extent of Gamma^- within the
    nonnegative orthant along ``e_k``.  When that extent is infinite (some
    nonnegative direction ``u`` with ``u_k > 0`` keeps gamma negative, as
    when ``v_k(i) < 0`` in every state) the axis is capped, by default at
    ``50 / rate scale``, and flagged as truncated.  The lower end of axis
    ``k`` reaches the points of ``Gamma^- and {gamma_k <= 0}`` that lift the
    far ends of the other axes, and the upper end of axis ``j`` covers the
    furthest such point along ``j``, so the fixed point sees every lift it
    needs.  ``steps`` cells span the box before the lift extension, and
    the extension keeps that cell size as long as the lattice stays within
    ``MAX_POINTS`` points.
    """
    if not is_stable(model).stable:
        raise PreconditionError("model is not stable: domain sets are undefined")
    d = model.d
    if cap is None:
        cap = 50.0 / model.rate_scale
    steps = _default_steps(d) if steps is None else steps
    eye = np.eye(d)
    hi = np.zeros(d)
    ext = np.zeros(d)
    truncated = []
    for k in range(d):
        root = ray_root(model, eye[k], u_max=cap)
        if _recession_unbounded(model, eye[k], nonneg=True):
            truncated.append(k + 1)
            hi[k] = cap
            ext[k] = cap
            continue
        x = _support(model, eye[k], cap=cap, nonneg=True)
        ext[k] = x[k] if x is not None else 0.0
        cand = max(2.0 * root if np.isfinite(root) else 0.0, 1.25 * ext[k])
        hi[k] = min(cand, cap) if cand > 0 else 1.0 / model.rate_scale
    lo = -0.25 * hi
    # the cell size is set by this core box; the lattice then grows to hold the lifts
    cell = (hi - lo) / np.broadcast_to(np.asarray(steps, dtype=float), (d,))
    for k in range(d):
        A_k = model.R[:, k][None, :]
        for j in range(d):
            if j == k:
                continue
            # lifts along axis k of points whose j-th coordinate is far out
            y = _support(model, eye[k], A_ub=np.vstack([A_k, -eye[j]]),
                         b_ub=[0.0, -min(ext[j], hi[j])], cap=cap)
            if y is not None:
                lo[k] = min(lo[k], 1.25 * y[k])
            # the point of Gamma^- and {gamma_k <= 0} that reaches furthest along axis j
            y = _support(model, eye[j], A_ub=A_k, cap=cap)
            if y is not None:
                lo[k] = min(lo[k], 1.25 * y[k])
                if y[j] >= 0.99 * cap and (j + 1) not in truncated:
                    truncated.append(j + 1)
                    hi[j] = cap
                elif (j + 1) not in truncated:
                    hi[j] = max(hi[j], min(1.25 * y[j], cap))
    lo = np.maximum(lo, -cap)
    n = np.ceil((hi - lo) / cell - 1e-9)
    total = float(np.prod(n + 1))
    if total > MAX_POINTS:
        n = np.maximum(np.floor(n / (total / MAX_POINTS) ** (1.0 / d)), 8)
    return BoundingBox.aligned(lo, hi, n.astype(int), truncated)


# ---------------------------------------------------------------------------
# lattice operations


def downclose(mask: np.ndarray, axes=None) -> np.ndarray:
    """Lattice down-closure: reversed cumulative OR along each axis."""
    out = mask.copy()
    axes = range(mask.ndim) if axes is None else axes
    for ax in axes:
        out = np.flip(np.logical_or.accumulate(np.flip(out, ax), axis=ax), ax)
    return out


def _project(mask: np.ndarray, k: int) -> np.ndarray:
    return mask.any(axis=k)


def _lift(Dk: np.ndarray, k: int) -> np.ndarray:
    return np.expand_dims(Dk, k)


@dataclass(eq=False)
class DomainGrid:
    box: BoundingBox
    Dk: list  # D_k as boolean lattices with axis k removed
    Dmax: np.ndarray
    gamma: np.ndarray  # gamma on the lattice
    gamma_minus: np.ndarray  # strict lattice mask of Gamma^-
    iterations: int
    trace: list = field(default_factory=list)  # point counts of each D_k per sweep

    @property
    def truncated_axes(self) -> tuple:
        return self.box.truncated

    @property
    def d(self) -> int:
        return self.box.d

    def contains(self, theta) -> bool:
        """Inner membership of a continuous point in D^(max).

        The point is snapped up to the nearest dominating lattice point, so a
        True answer is certain (D^(max) is a down-set) up to lattice error in
        the sets themselves.
        """
        idx = np.ceil((np.asarray(theta, dtype=float) - self.box.lo) / self.box.resolution - 1e-9).astype(int)
        # raising a coordinate to the box floor gives a dominating point
        idx = np.maximum(idx, 0)
        if (idx > self.box.steps).any():
            return False
        return bool(self.Dmax[tuple(idx)])

    def sup_along(self, k: int) -> float:
        """Largest theta_k over D^(max) lattice points (0-based axis)."""
        if not self.Dmax.any():
            return -np.inf
        other = tuple(a for a in range(self.d) if a != k)
        col = self.Dmax.any(axis=other)
        return float(self.box.axes()[k][np.flatnonzero(col).max()])


def _masks(model: MmfnModel, box: BoundingBox):
    pts = box.points()
    g = gamma_batch(model, pts)
    minus = g < -_band(model, pts)
    return pts, g, minus


def _other_grid(box: BoundingBox, k: int) -> np.ndarray:
    """Lattice points of the axes other than ``k``, embedded with theta_k = 0."""
    axes = box.axes()
    other = [a for a in range(box.d) if a != k]
    grids = np.meshgrid(*[axes[a] for a in other], indexing="ij")
    base = np.zeros(grids[0].shape + (box.d,))
    for j, a in enumerate(other):
        base[..., a] = grids[j]
    return base


def _column_roots(model: MmfnModel, box: BoundingBox, k: int, iters: int = 120):
    """Endpoints of ``{t : gamma(x + t e_k) < 0}`` for every lattice point x of the other axes.

    gamma is convex along the column, so the set is an open interval found
    by golden-section search for the minimum and bisection for the two
    roots.  Empty columns give NaN; columns that stay negative out to a
    distance far beyond the box give infinite ends.
    """
    base = _other_grid(box, k)
    shape = base.shape[:-1]
    flat = base.reshape(-1, box.d)
    n = flat.shape[0]
    W = 100.0 * float(np.max(box.hi - box.lo))

    def f(t):
        th = flat.copy()
        th[:, k] = t
        return gamma_batch(model, th)

    band = _band(model, flat) * np.maximum(1.0, W)
    ratio = (np.sqrt(5.0) - 1.0) / 2.0
    a = np.full(n, -W)
    b = np.full(n, W)
    c = b - ratio * (b - a)
    e = a + ratio * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(iters):
        left = fc < fe
        b = np.where(left, e, b)
        a = np.where(left, a, c)
        e_new = np.where(left, c, a + ratio * (b - a))
        c_new = np.where(left, b - ratio * (b - a), e)
        fe_new = np.where(left, fc, np.nan)
        fc_new = np.where(left, np.nan, fe)
        c, e = c_new, e_new
        # one new evaluation per column: at c where we moved left, at e otherwise
        probe = np.where(left, c, e)
        fp = f(probe)
        fc = np.where(left, fp, fc_new)
        fe = np.where(left, fe_new, fp)
    tmin = 0.5 * (a + b)
    fmin = f(tmin)
    has = fmin < -band

    def root(outer, inner):
        # bisection between outer (gamma >= 0) and inner (gamma < 0)
        lo, hi = outer.copy(), inner.copy()
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            neg = f(mid) < 0
            hi = np.where(neg, mid, hi)
            lo = np.where(neg, lo, mid)
        return 0.5 * (lo + hi)

    L = np.where(f(np.full(n, -W)) < 0, -np.inf, root(np.full(n, -W), tmin))
    U = np.where(f(np.full(n, W)) < 0, np.inf, root(np.full(n, W), tmin))
    L = np.where(has, L, np.nan).reshape(shape)
    U = np.where(has, U, np.nan).reshape(shape)
    return L, U


def _column_top(D: np.ndarray, axis_vals: np.ndarray, pos: int) -> np.ndarray:
    """Largest lattice value along axis ``pos`` inside the down-set D; -inf for empty columns."""
    n = D.shape[pos]
    idx = np.where(D, np.arange(n).reshape([-1 if i == pos else 1 for i in range(D.ndim)]), -1)
    top = idx.max(axis=pos)
    return np.where(top >= 0, axis_vals[np.maximum(top, 0)], -np.inf)


def _reverse_cummax(a: np.ndarray) -> np.ndarray:
    out = a
    for ax in range(a.ndim):
        out = np.flip(np.maximum.accumulate(np.flip(out, ax), axis=ax), ax)
    return out


def fixed_point_iteration(model: MmfnModel, box: BoundingBox | None = None,
                          max_sweeps: int = 200) -> DomainGrid:
    """Iterate the domain fixed point on the lattice from ``D_k^(0) = {theta < 0}``.

    One sweep computes, for each ``k``,

        D_k <- D_k  union  down( proj_k( union_{A contains k} S_A ) ),
        S_A  = Gamma^-_A  intersect  {theta : theta_{K-l} in D_l for l not in A},

    reading the previous generation only.  ``D_k`` lives on the lattice of
    the other axes; the lift coordinate ``theta_k`` is searched continuously,
    since along a column ``Gamma^-`` is an interval, the ``gamma_j`` are
    linear and each ``D_l`` is a down-set.  The sweep stops when no set
    changes, and ``D^(max) = down(Gamma^-) intersect {theta_{K-k} in D_k}``.
    """
    if box is None:
        box = auto_box(model)
    d = box.d
    if d != model.d:
        raise ValueError("box dimension does not match the model")
    pts, g, minus = _masks(model, box)
    axes = box.axes()
    R = model.R
    cols = [_column_roots(model, box, k) for k in range(d)]
    bases = [_other_grid(box, k) for k in range(d)]
    tol = BAND * model.rate_scale * max(1.0, float(np.abs(np.concatenate([box.lo, box.hi])).max()))
    # D_k^(0): all remaining coordinates strictly negative
    Dk = []
    for k in range(d):
        Dk.append((np.delete(bases[k], k, axis=-1) < 0).all(axis=-1))
    subsets = [A for r in range(1, d + 1) for A in itertools.combinations(range(d), r)]
    trace = [[int(D.sum()) for D in Dk]]
    for sweep in range(1, max_sweeps + 1):
        new = []
        for k in range(d):
            L, U = cols[k]
            base = bases[k]
            ok = ~np.isnan(L)
            reach = np.zeros(L.shape, dtype=bool)
            # thresholds t <= T_l(x) from the down-sets D_l, l != k
            T = {}
            for l in range(d):
                if l == k:
                    continue
                pos_k = k if k < l else k - 1
                top = _column_top(Dk[l], axes[k], pos_k)
                pos_l = l if l < k else l - 1
                T[l] = np.expand_dims(top, pos_l)
            for A in subsets:
                if k not in A:
                    continue
                lower = np.where(ok, L, np.inf)
                upper = np.where(ok, U, -np.inf)
                feas = ok.copy()
                for j in A:
                    coef = R[k, j]
                    rest = base @ R[:, j]  # theta_k is zero in base
                    if coef > 0:
                        upper = np.minimum(upper, -rest / coef)
                    elif coef < 0:
                        lower = np.maximum(lower, -rest / coef)
                    else:
                        feas &= rest <= tol
                for l in range(d):
                    if l not in A:
                        upper = np.minimum(upper, T[l])
                reach |= feas & (lower <= upper + tol)
            new.append(Dk[k] | downclose(reach))
        changed = any((a != b).any() for a, b in zip(new, Dk))
        Dk = new
        trace.append([int(D.sum()) for D in Dk])
        if not changed:
            break
    else:
        raise ConvergenceError(f"domain iteration did not settle in {max_sweeps} sweeps",
                               trace=trace)
    if all(t == trace[0] for t in trace):
        raise NumericalError("domain iteration stayed at its trivial starting point; "
                             "refine the box or resolution")
    # down(Gamma^-): theta_a below the upper root of some dominating column
    Dmax = np.zeros(box.shape, dtype=bool)
    for a in range(d):
        U = np.where(np.isnan(cols[a][1]), -np.inf, cols[a][1])
        Dmax |= pts[..., a] < np.expand_dims(_reverse_cummax(U), a)
    for k in range(d):
        Dmax &= _lift(Dk[k], k)
    return DomainGrid(box=box, Dk=Dk, Dmax=Dmax, gamma=g, gamma_minus=minus,
                      iterations=sweep, trace=trace)


# ---------------------------------------------------------------------------
# exact two-dimensional solution


@dataclass(frozen=True)
class TwoDExact:
    alpha: tuple
    iterations: int
    history: list

    def in_domain(self, model: MmfnModel, theta) -> bool:
        """Membership in ``{theta in down(Gamma^-) : theta_i < alpha_i}``."""
        theta = np.asarray(theta, dtype=float)
        if not (theta < np.asarray(self.alpha)).all():
            return False
        return _in_down_gamma_minus(model, theta)


def _in_down_gamma_minus(model: MmfnModel, theta) -> bool:
    """Is there a point of Gamma^- strictly above theta?"""
    if gamma(model, theta) < 0:
        return True
    d = model.d
    # maximize t subject to gamma(theta + t 1 + s) <= 0 with s >= 0 free shift
    ones = np.ones(d)
    x = _support(model, ones, A_ub=-np.eye(d), b_ub=-theta, cap=1e6)
    return x is not None and (x > theta).all()


def _tangent_polish(model: MmfnModel, x, k: int):
    """Refine a maximizer of theta_k over Gamma^- (d = 2) by Newton on
    ``gamma = 0`` and ``d gamma / d theta_other = 0``."""
    j = 1 - k
    x = np.asarray(x, dtype=float).copy()
    for _ in range(50):
        sp = perron(model, x)
        F = np.array([sp.gamma, sp.grad[j]])
        if np.abs(F).max() <= 1e-14 * model.rate_scale:
            break
        eps = 1e-6 * max(1.0, np.abs(x).max())
        H = np.empty((2, 2))
        for a in range(2):
            e = np.zeros(2)
            e[a] = eps
            H[:, a] = (perron(model, x + e).grad - perron(model, x - e).grad) / (2 * eps)
        J = np.vstack([sp.grad, H[j]])
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        x = x + step
    return x


def _right_root(model: MmfnModel, k: int, s: float, t0: float, cap: float) -> float:
    """Largest t with gamma(theta) = 0 where theta_k = t and the other coordinate is s,
    searching to the right of a point t0 where gamma < 0."""
    j = 1 - k

    def f(t):
        th = np.empty(2)
        th[k] = t
        th[j] = s
        return gamma(model, th)

    hi = max(t0, 0.0) + 1.0 / model.rate_scale
    while f(hi) < 0:
        hi = t0 + 2.0 * (hi - t0)
        if hi > cap:
            return np.inf
    return brentq(f, t0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def _sup_coordinate(model: MmfnModel, k: int, bound: float, cap: float) -> float:
    """``sup{theta_k >= 0 : theta in Gamma^-_{other}, theta_other <= bound}`` for d = 2.

    The maximum of a linear function over the closed convex feasible set is
    attained at the tangent point of gamma = 0, at an intersection of two
    constraint boundaries, or at the origin; all candidates are enumerated.
    """
    j = 1 - k
    r = model.R[:, j]  # gamma_j(theta) = <r, theta>
    e_k = np.eye(2)[k]
    A_ub = np.vstack([r, np.eye(2)[j]])
    b_ub = np.array([0.0, bound])
    if _recession_unbounded(model, e_k, A_ub if np.isfinite(bound) else A_ub[:1]):
        return np.inf
    tol = 1e-12 * model.rate_scale
    cands = [0.0]

    def feasible(th):
        return (r @ th <= 1e-12 * max(1.0, np.abs(th).max())
                and th[j] <= bound + 1e-12 * max(1.0, abs(bound) if np.isfinite(bound) else 1.0))

    # tangent point of the unconstrained problem
    x = _support(model, e_k, cap=cap)
    if x is not None and not _recession_unbounded(model, e_k):
        x = _tangent_polish(model, x, k)
        if abs(gamma(model, x)) <= 1e-9 * model.rate_scale and feasible(x):
            cands.append(x[k])
    # gamma = 0 on the line theta_j = bound
    if np.isfinite(bound):
        def g_line(t):
            p = np.zeros(2)
            p[k] = t
            p[j] = bound
            return gamma(model, p)

        # convex along the line, so a bounded golden-section search is safe
        res = minimize_scalar(g_line, bounds=(-cap, cap), method="bounded",
                              options={"xatol": 1e-12 / model.rate_scale})
        if res.fun < 0:
            t = _right_root(model, k, bound, res.x, cap)
        elif res.fun <= tol:
            t = res.x
        else:
            t = None
        if t is not None:
            p = np.zeros(2)
            p[k] = t
            p[j] = bound
            if np.isfinite(t) and feasible(p):
                cands.append(t)
        # corner: theta_j = bound and gamma_j = 0
        corner = -r[j] * bound / r[k] if abs(r[k]) > 1e-15 else np.inf
        if np.isfinite(corner) and abs(corner) <= cap:
            p = np.zeros(2)
            p[j] = bound
            p[k] = corner
            if gamma(model, p) <= tol * max(1.0, np.abs(p).max()):
                cands.append(p[k])
    # gamma = 0 on the line gamma_j = 0 (through the origin)
    w = np.array([r[1], -r[0]]) if k == 0 else np.array([-r[1], r[0]])
    for sgn in (1.0, -1.0):
        ww = sgn * w / np.linalg.norm(w)
        u = ray_root(model, ww, u_max=cap)
        if np.isfinite(u) and u > 0:
            p = u * ww
            if feasible(p):
                cands.append(p[k])
    return max(max(cands), 0.0)


def _step(old: float, new: float) -> float:
    if np.isinf(new) or np.isinf(old):
        return 0.0 if np.isinf(new) and np.isinf(old) else np.inf
    return abs(new - old)


def two_d_exact(model: MmfnModel, tol: float = 1e-12, max_iter: int = 1000,
                cap: float | None = None) -> TwoDExact:
    """Solve ``alpha_1 = sup{theta_1 >= 0 : theta in Gamma^-_2, theta_2 <= alpha_2}``
    and the mirrored equation by alternating maximization from ``(0, 0)``."""
    if model.d != 2:
        raise PreconditionError("two_d_exact needs d = 2")
    if not is_stable(model).stable:
        raise PreconditionError("model is not stable")
    if cap is None:
        cap = 1e4 / model.rate_scale
    a = [0.0, 0.0]
    history = [tuple(a)]
    for it in range(1, max_iter + 1):
        # the sups grow with the bounds; values beyond half the search
        # radius mean the iteration runs off to infinity
        a1 = max(_sup_coordinate(model, 0, a[1], cap), a[0])
        a1 = np.inf if a1 > 0.5 * cap else a1
        a2 = max(_sup_coordinate(model, 1, a1, cap), a[1])
        a2 = np.inf if a2 > 0.5 * cap else a2
        change = max(_step(a[0], a1), _step(a[1], a2))
        a = [a1, a2]
        history.append(tuple(a))
        if change <= tol * max([1.0] + [abs(x) for x in a if np.isfinite(x)]):
            break
    else:
        raise ConvergenceError("alternating maximization did not converge", trace=history)
    return TwoDExact(alpha=tuple(float(x) for x in a), iterations=it, history=history)


# ---------------------------------------------------------------------------
# bounds


def _unit_nonneg(c, d: int) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape != (d,):
        raise PreconditionError(f"direction must have length {d}")
    if (c < 0).any():
        raise PreconditionError("direction must be nonnegative")
    n = np.linalg.norm(c)
    if n == 0:
        raise PreconditionError("direction must be nonzero")
    return c / n


@dataclass(frozen=True)
class UpperBound:
    """Decay-rate bounds from the moment domain D^(max).

    ``ray`` is ``sup{a >= 0 : a c in D^(max)}`` and ``hyperplane`` is
    ``sup{<theta, c> : theta in D^(max)}``; each carries a lattice error bar.
    """

    c: tuple
    ray: float
    ray_err: float
    hyperplane: float
    hyperplane_err: float
    box_limited: bool

    def to_dict(self) -> dict:
        return {"c": list(self.c), "ray": self.ray, "ray_err": self.ray_err,
                "hyperplane": self.hyperplane, "hyperplane_err": self.hyperplane_err,
                "box_limited": self.box_limited}


def upper_decay_rate(model: MmfnModel, c, grid: DomainGrid) -> UpperBound:
    c = _unit_nonneg(c, model.d)
    box = grid.box
    h = box.resolution
    # ray: membership is monotone along c because D^(max) is a down-set
    a_hi = float(np.min(np.where(c > 0, box.hi / np.where(c > 0, c, 1.0), np.inf)))
    if not grid.contains(np.zeros(model.d)):
        ray = 0.0
    elif grid.contains(a_hi * c):
        ray = a_hi
    else:
        a_lo = 0.0
        while a_hi - a_lo > 1e-9 * float(np.min(h)):
            mid = 0.5 * (a_lo + a_hi)
            if grid.contains(mid * c):
                a_lo = mid
            else:
                a_hi = mid
        ray = a_lo
    pts = box.points()[grid.Dmax]
    hyper = float((pts @ c).max()) if len(pts) else 0.0
    limited = False
    for k in range(model.d):
        if c[k] > 0:
            idx = [slice(None)] * model.d
            idx[k] = -1
            if grid.Dmax[tuple(idx)].any():
                limited = True
    return UpperBound(c=tuple(c.tolist()), ray=float(max(ray, 0.0)), ray_err=float(np.linalg.norm(h)),
                      hyperplane=max(hyper, 0.0), hyperplane_err=float(h @ c), box_limited=limited)


@dataclass(frozen=True)
class LowerBound:
    """Decay-rate bound from the change of measure (an upper end for the rate).

    ``value`` is +inf when the defining set is empty within the box.
    """

    kind: str
    value: float
    witness: tuple | None
    empty: bool = False
    in_corn: bool | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value,
                "witness": None if self.witness is None else list(self.witness),
                "empty": self.empty, "in_corn": self.in_corn, "detail": self.detail}


def _gk_feasible(model: MmfnModel, k: int, g, grad, th, band):
    """Pointwise test of the G_k constraints (0-based k) on stacked inputs."""
    d = model.d
    gk = th @ model.R
    ok = g > band
    for l in range(d):
        if l == k:
            continue
        ok &= gk[..., l] >= -band
        ok &= grad[..., l] < -band
    ok &= (grad @ model.R_inv.T)[..., k] > band
    ok &= th[..., k] >= 0
    return ok


def lower_decay_rate_coordinate(model: MmfnModel, k: int, box: BoundingBox | None = None) -> LowerBound:
    """``inf{theta_k >= 0 : theta in G_k}`` by lattice scan, bisection along
    each column and a continuous polish of the best candidates (1-based k)."""
    if not is_stable(model).stable:
        raise PreconditionError("model is not stable")
    if box is None:
        box = auto_box(model)
    kk = k - 1
    # only theta_k >= 0 can be feasible
    sl = [slice(None)] * model.d
    start = int(np.searchsorted(box.axes()[kk], -1e-12 * box.resolution[kk]))
    sl[kk] = slice(start, None)
    pts = box.points()[tuple(sl)]
    g, grad = spectral_batch(model, pts)
    band = _band(model, pts)
    ok = _gk_feasible(model, kk, g, grad, pts, band)
    if not ok.any():
        return LowerBound("coordinate", np.inf, None, empty=True,
                          detail=f"G_{k} has no lattice point in the box")
    # lowest feasible lattice point in each column along axis k
    cols = np.argmax(ok, axis=kk)
    has = ok.any(axis=kk)
    low = np.where(has, cols, np.iinfo(np.int64).max).ravel()
    h = box.resolution[kk]
    best = np.inf
    best_pt = None
    cands = []

    def feas(p):
        sp = perron(model, p)
        return bool(_gk_feasible(model, kk, np.array(sp.gamma), sp.grad, p, _band(model, p)))

    # bisect below the lowest lattice points, then polish: the infimum
    # usually sits between lattice columns, so a continuous solve over the
    # closure of G_k finishes the search
    for flat in np.argsort(low, kind="stable")[:min(8, int(has.sum()))]:
        oi = np.unravel_index(flat, has.shape)
        idx = list(oi)
        idx.insert(kk, int(cols[oi]))
        th = pts[tuple(idx)].copy()
        lo_t, hi_t = max(th[kk] - h, 0.0), th[kk]
        p = th.copy()
        p[kk] = lo_t
        if lo_t < hi_t and not feas(p):
            for _ in range(60):
                p[kk] = 0.5 * (lo_t + hi_t)
                if feas(p):
                    hi_t = p[kk]
                else:
                    lo_t = p[kk]
            th[kk] = hi_t
        else:
            th[kk] = lo_t
        cands.append(th)
        if th[kk] < best:
            best, best_pt = float(th[kk]), th
    for x0 in cands:
        x = _gk_polish(model, kk, x0)
        if x is not None and x[kk] < best:
            best, best_pt = float(x[kk]), x
    return LowerBound("coordinate", float(best), tuple(best_pt.tolist()))


def _gk_polish(model: MmfnModel, kk: int, x0):
    """Minimize theta_k over the closure of G_k from a feasible start (0-based kk)."""
    d = model.d
    others = [l for l in range(d) if l != kk]
    R, R_inv = model.R, model.R_inv
    cons = [
        {"type": "ineq", "fun": lambda th: perron(model, th).gamma,
         "jac": lambda th: perron(model, th).grad},
        {"type": "ineq", "fun": lambda th: (th @ R)[others], "jac": lambda th: R[:, others].T},
        {"type": "ineq", "fun": lambda th: -perron(model, th).grad[others]},
        {"type": "ineq", "fun": lambda th: np.atleast_1d((R_inv @ perron(model, th).grad)[kk])},
    ]
    e = np.zeros(d)
    e[kk] = 1.0
    bounds = [(0.0, None) if l == kk else (None, None) for l in range(d)]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(lambda th: th[kk], np.asarray(x0, dtype=float), jac=lambda th: e,
                           constraints=cons, bounds=bounds, method="SLSQP",
                           options={"maxiter": 300, "ftol": 1e-15})
    except (NumericalError, ValueError, np.linalg.LinAlgError):
        return None
    x = res.x
    tol = 1e-9 * model.rate_scale * max(1.0, np.abs(x).max())
    for c in cons:
        if (np.atleast_1d(c["fun"](x)) < -tol).any():
            return None
    return x


def lower_decay_rate_direction(model: MmfnModel, c, cap: float | None = None) -> LowerBound:
    """``inf{u >= 0 : u c in up(Gamma^+)}``: the first positive root of ``gamma(u c)``.

    The direction must lie in the cone over the upper frontier of Gamma^-:
    the root must exist and ``grad gamma >= 0`` there.  Otherwise
    :class:`DirectionOutsideCorn` is raised.
    """
    c = _unit_nonneg(c, model.d)
    if not is_stable(model).stable:
        raise PreconditionError("model is not stable")
    if cap is None:
        cap = 1e4 / model.rate_scale
    u = ray_root(model, c, u_max=cap)
    if not np.isfinite(u):
        raise DirectionOutsideCorn("gamma stays negative along the direction: no boundary crossing")
    if u <= 0:
        raise DirectionOutsideCorn("gamma is not negative near the origin along the direction")
    sp = perron(model, u * c)
    tol = 1e-9 * model.rate_scale
    if (sp.grad < -tol).any():
        raise DirectionOutsideCorn(
            f"crossing point {(u * c).tolist()} is not on the upper frontier of Gamma^- "
            f"(gradient {sp.grad.tolist()})")
    return LowerBound("direction", float(u), tuple((u * c).tolist()), in_corn=True)


def in_corn(model: MmfnModel, c) -> bool:
    try:
        lower_decay_rate_direction(model, c)
    except DirectionOutsideCorn:
        return False
    return True


# ---------------------------------------------------------------------------
# exports


def write_grid_csv(grid: DomainGrid, path) -> None:
    pts = grid.box.points().reshape(-1, grid.d)
    g = grid.gamma.ravel()
    gm = grid.gamma_minus.ravel()
    dm = grid.Dmax.ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"theta_{k + 1}" for k in range(grid.d)] + ["gamma", "in_gamma_minus", "in_dmax"])
        for p, gv, a, b in zip(pts, g, gm, dm):
            w.writerow([f"{x:.17g}" for x in p] + [f"{gv:.17g}", int(a), int(b)])


def boundary_points(grid: DomainGrid) -> np.ndarray:
    """D^(max) lattice points with a neighbour above them outside the set."""
    D = grid.Dmax
    edge = np.zeros_like(D)
    for ax in range(D.ndim):
        nxt = np.zeros_like(D)
        sl_src = [slice(None)] * D.ndim
        sl_dst = [slice(None)] * D.ndim
        sl_src[ax] = slice(1, None)
        sl_dst[ax] = slice(None, -1)
        nxt[tuple(sl_dst)] = D[tuple(sl_src)]
        edge |= D & ~nxt
    return grid.box.points()[edge]


def write_boundary_csv(grid: DomainGrid, path) -> None:
    pts = boundary_points(grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"theta_{k + 1}" for k in range(grid.d)])
        for p in pts:
            w.writerow([f"{x:.17g}" for x in p])


# ---------------------------------------------------------------------------
# combined report


@dataclass(frozen=True)
class DecayReport:
    """Decay-rate bracket in one direction with an optional empirical estimate.

    ``lower_end`` is the ray bound from D^(max) and ``upper_end`` the
    change-of-measure root; the true decay rate lies between them up to
    lattice error.
    """

    c: tuple
    upper: UpperBound
    lower: LowerBound | None
    in_corn: bool
    corn_detail: str
    empirical: object = None  # simulator.TailEstimate
    bracket: str = "not-run"  # holds, violated, inconclusive, not-run

    @property
    def lower_end(self) -> float:
        return self.upper.ray

    @property
    def upper_end(self) -> float:
        return self.lower.value if self.lower is not None else np.inf

    @property
    def gap(self) -> float:
        return self.upper_end - self.lower_end

    def to_dict(self) -> dict:
        out = {
            "c": list(self.c),
            "decay_rate_lower_end": self.lower_end,
            "decay_rate_upper_end": self.upper_end,
            "gap": self.gap,
            "moment_domain_bound": self.upper.to_dict(),
            "change_of_measure_bound": None if self.lower is None else self.lower.to_dict(),
            "in_corn": self.in_corn,
            "corn_detail": self.corn_detail,
            "box_limited": self.upper.box_limited,
            "bracket": self.bracket,
        }
        if self.empirical is not None:
            out["empirical"] = self.empirical.to_dict()
        return out


def decay_report(model: MmfnModel, c, grid: DomainGrid) -> DecayReport:
    c = _unit_nonneg(c, model.d)
    up = upper_decay_rate(model, c, grid)
    try:
        low = lower_decay_rate_direction(model, c)
        corn, detail = True, ""
    except DirectionOutsideCorn as exc:
        low, corn, detail = None, False, str(exc)
    return DecayReport(tuple(c.tolist()), up, low, corn, detail)


def bracket_verdict(report: DecayReport, estimate, rel_precision: float = 0.1) -> str:
    """``violated`` outside ``[lower - 3 se, upper + 3 se]``; ``inconclusive`` when the
    estimate is unusable or its 95% half-width exceeds ``rel_precision`` of the
    estimate; otherwise ``holds``."""
    if estimate is None or not estimate.usable or not np.isfinite(estimate.slope_stderr):
        return "inconclusive"
    r, se = estimate.decay_rate, estimate.slope_stderr
    if r < report.lower_end - 3 * se or r > report.upper_end + 3 * se:
        return "violated"
    if 1.96 * se > rel_precision * abs(r):
        return "inconclusive"
    return "holds"
