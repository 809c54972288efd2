"""Event-driven simulation of the reflected network and Monte-Carlo estimators.

Paths are exact: between background jumps and buffer hits all rates are
constant, so ``Z`` moves linearly and every time integral is evaluated in
closed form per segment.  Replication ``r`` of a run with root seed ``s``
draws from ``PCG64(SeedSequence(s, spawn_key=(r,)))``; results are stored by
replication index and reduced in index order, so they do not depend on the
number of worker threads.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernel as K
from .errors import ConvergenceError, NumericalError, PreconditionError
from .model import MmfnModel
from .spectral import perron
from .traffic import capped_flow, is_stable, stationary_background

__all__ = [
    "PathState",
    "PathStats",
    "Trajectory",
    "TailEstimate",
    "BarResidual",
    "MartingaleReport",
    "DriftCheck",
    "release_rates",
    "initial_state",
    "step",
    "simulate",
    "simulate_partial",
    "estimate_tail",
    "estimate_tails",
    "estimate_bar_residual",
    "martingale_check",
    "twisted_drift_check",
    "partial_slopes",
    "partial_slope_check",
    "relaxation_time",
    "default_levels",
    "replication_rng",
]

DEFAULT_SEED = 20240917
CACHE_MAX_D = 12
RECORD_CHUNK = 1 << 14


def replication_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(r,))))


def _workers(threads) -> int:
    if threads is None:
        return os.cpu_count() or 1
    return max(int(threads), 1)


def _map_reps(fn, reps: int, threads=None) -> list:
    """Run ``fn(r)`` for every replication; results come back in index order."""
    n = _workers(threads)
    if n == 1 or reps == 1:
        return [fn(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, range(reps)))


# ---------------------------------------------------------------------------
# rates and state


def release_rates(model: MmfnModel, J: int, positive_set) -> np.ndarray:
    """Release rates in background state ``J`` (1-based) with buffers ``positive_set`` nonempty.

    Positive buffers release at ``mu``; empty ones solve
    ``b_k = min(mu_k, lam_k + sum_l b_l p_lk)``.
    """
    i = int(J) - 1
    if not 0 <= i < model.m:
        raise ValueError(f"background state must be in 1..{model.m}")
    positive = np.zeros(model.d, dtype=bool)
    for k in positive_set:
        if not 1 <= k <= model.d:
            raise ValueError(f"station {k} out of range")
        positive[k - 1] = True
    b = capped_flow(model.lam[:, i], model.mu[:, i], model.P, ~positive)
    if (b < 0).any():
        raise NumericalError("negative release rate")
    return b


@dataclass(frozen=True, eq=False)
class PathState:
    t: float
    Z: np.ndarray
    Y: np.ndarray
    J: int  # 1-based background state
    V: np.ndarray = None  # free process V(t), kept for the reflection identity
    Z0: np.ndarray = None
    t_jump: float = -1.0  # pending background jump time, -1 if not drawn

    @property
    def empty(self) -> frozenset:
        return frozenset(int(k) + 1 for k in np.flatnonzero(self.Z == 0.0))


def initial_state(model: MmfnModel, rng: np.random.Generator, z0=None, J0=None) -> PathState:
    """Start at ``z0`` (default 0) with ``J0`` drawn from pi by inverse CDF unless given."""
    d = model.d
    z = np.zeros(d) if z0 is None else np.array(z0, dtype=float)
    if J0 is None:
        pi = stationary_background(model.Q)
        J0 = int(np.searchsorted(np.cumsum(pi), rng.random() * pi.sum(), side="right")) + 1
        J0 = min(J0, model.m)
    return PathState(t=0.0, Z=z, Y=np.zeros(d), J=int(J0), V=np.zeros(d), Z0=z.copy())


@dataclass(frozen=True)
class PathStats:
    events: int
    conservation_violations: int
    complementarity_violations: int
    monotonicity_violations: int
    negative_rate_violations: int
    negativity_violations: int
    max_conservation_error: float
    empty_time: tuple

    @property
    def violations(self) -> int:
        return (self.conservation_violations + self.complementarity_violations
                + self.monotonicity_violations + self.negative_rate_violations
                + self.negativity_violations)

    def merge(self, other: "PathStats") -> "PathStats":
        return PathStats(
            self.events + other.events,
            self.conservation_violations + other.conservation_violations,
            self.complementarity_violations + other.complementarity_violations,
            self.monotonicity_violations + other.monotonicity_violations,
            self.negative_rate_violations + other.negative_rate_violations,
            self.negativity_violations + other.negativity_violations,
            max(self.max_conservation_error, other.max_conservation_error),
            tuple(a + b for a, b in zip(self.empty_time, other.empty_time)),
        )

    def to_dict(self) -> dict:
        return {
            "events": self.events,
            "conservation_violations": self.conservation_violations,
            "complementarity_violations": self.complementarity_violations,
            "monotonicity_violations": self.monotonicity_violations,
            "negative_rate_violations": self.negative_rate_violations,
            "negativity_violations": self.negativity_violations,
            "max_conservation_error": self.max_conservation_error,
        }


class _Runner:
    """Mutable kernel state for one path."""

    def __init__(self, model: MmfnModel, regulated, state: PathState, rng, record: bool,
                 C=None, X=None, TH=None, H=None, burn: float = 0.0):
        d, m = model.d, model.m
        self.model = model
        self.rng = rng
        self.regulated = np.asarray(regulated, dtype=np.bool_)
        self.Pt = np.ascontiguousarray(model.P.T)
        self.tstate = np.array([state.t, state.t_jump], dtype=float)
        self.J = np.array([state.J - 1], dtype=np.int64)
        self.Z = np.array(state.Z, dtype=float)
        self.Y = np.array(state.Y, dtype=float)
        self.Yc = np.zeros(d)
        self.V = np.zeros(d) if state.V is None else np.array(state.V, dtype=float)
        self.Vc = np.zeros(d)
        self.Z0 = self.Z.copy() if state.Z0 is None else np.array(state.Z0, dtype=float)
        self.Zmax = np.maximum(self.Z, 0.0)
        self.burn = float(burn)
        self.C = np.zeros((0, d)) if C is None else np.ascontiguousarray(C, dtype=float)
        self.X = np.zeros((self.C.shape[0], 0)) if X is None else np.ascontiguousarray(X, dtype=float)
        self.occ = np.zeros(self.X.shape)
        self.TH = np.zeros((0, d)) if TH is None else np.ascontiguousarray(TH, dtype=float)
        self.H = np.zeros((0, m)) if H is None else np.ascontiguousarray(H, dtype=float)
        self.psi = np.zeros(self.TH.shape[0])
        self.psik = np.zeros((self.TH.shape[0], d))
        self.empty_time = np.zeros(d)
        self.counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
        self.fstats = np.zeros(1)
        if d <= CACHE_MAX_D:
            self.cache_b = np.zeros((m, 1 << d, d))
            self.cache_ok = np.zeros((m, 1 << d), dtype=np.bool_)
        else:
            self.cache_b = np.zeros((0, 0, d))
            self.cache_ok = np.zeros((0, 0), dtype=np.bool_)
        self.record = record
        self.rec_f = np.zeros((RECORD_CHUNK if record else 0, 2 + 3 * d))
        self.rec_j = np.zeros(self.rec_f.shape[0], dtype=np.int64)
        self.rec_n = np.zeros(1, dtype=np.int64)

    def run(self, t_end: float, max_events: int = np.iinfo(np.int64).max) -> int:
        model = self.model
        while True:
            status = K.run_path(
                model.lam, model.mu, self.Pt, model.Q, model.v, model.R, self.regulated, self.rng,
                self.tstate, self.J, self.Z, self.Y, self.Yc, self.V, self.Vc, self.Zmax, self.Z0,
                float(t_end), self.burn, max_events,
                self.C, self.X, self.occ, self.TH, self.H, self.psi, self.psik, self.empty_time,
                self.counters, self.fstats, self.cache_b, self.cache_ok,
                self.rec_f, self.rec_j, self.rec_n, self.record)
            if status == K.RECORD_FULL:
                grow = self.rec_f.shape[0]
                self.rec_f = np.concatenate([self.rec_f, np.zeros((grow, self.rec_f.shape[1]))])
                self.rec_j = np.concatenate([self.rec_j, np.zeros(grow, dtype=np.int64)])
                continue
            if status == K.LIVELOCK:
                raise NumericalError(f"livelock: more than {10 * model.d} zero-length sub-events "
                                     f"at t = {self.tstate[0]!r}")
            if status == K.RATE_FAILURE:
                raise ConvergenceError("release-rate iteration exceeded its cap")
            return status

    def state(self) -> PathState:
        return PathState(t=float(self.tstate[0]), Z=self.Z.copy(), Y=self.Y + self.Yc,
                         J=int(self.J[0]) + 1, V=self.V + self.Vc, Z0=self.Z0.copy(),
                         t_jump=float(self.tstate[1]))

    def stats(self) -> PathStats:
        c = self.counters
        return PathStats(int(c[K.C_EVENTS]), int(c[K.C_CONSERVATION]), int(c[K.C_COMPLEMENTARITY]),
                         int(c[K.C_MONOTONE]), int(c[K.C_RATE_SIGN]), int(c[K.C_NEGATIVE]),
                         float(self.fstats[0]), tuple(self.empty_time.tolist()))

    def segments(self):
        n = int(self.rec_n[0])
        return self.rec_f[:n].copy(), self.rec_j[:n] + 1


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Piecewise-linear path: segment ``s`` runs over ``[t_start[s], t_end[s])`` in
    background state ``J[s]`` from ``Z_start[s]`` with slope ``slope[s]`` and
    regulator rates ``y_rate[s]``."""

    t_start: np.ndarray
    t_end: np.ndarray
    J: np.ndarray
    Z_start: np.ndarray
    slope: np.ndarray
    y_rate: np.ndarray
    final: PathState
    stats: PathStats
    regulated: tuple = ()

    def __len__(self) -> int:
        return self.t_start.shape[0]

    @classmethod
    def _from(cls, runner: _Runner, regulated) -> "Trajectory":
        f, j = runner.segments()
        d = runner.model.d
        return cls(f[:, 0], f[:, 1], j, f[:, 2:2 + d], f[:, 2 + d:2 + 2 * d], f[:, 2 + 2 * d:],
                   runner.state(), runner.stats(), tuple(regulated))

    def Z_at(self, t: float) -> np.ndarray:
        s = int(np.searchsorted(self.t_start, t, side="right")) - 1
        if s < 0:
            raise ValueError("time before the start of the path")
        if t >= self.final.t:
            return self.final.Z.copy()
        return self.Z_start[s] + self.slope[s] * (t - self.t_start[s])

    def time_empty_fraction(self) -> np.ndarray:
        """Fraction of time each buffer spends at zero."""
        dur = self.t_end - self.t_start
        at_zero = (self.Z_start == 0.0) & (self.slope == 0.0)
        return (dur[:, None] * at_zero).sum(axis=0) / max(self.final.t - self.t_start[0], 1e-300)

    def digest(self) -> bytes:
        parts = [self.t_start, self.t_end, self.J, self.Z_start, self.slope, self.y_rate]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)

    def write_csv(self, path) -> None:
        d = self.Z_start.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_start", "t_end", "J"] + [f"Z{k + 1}" for k in range(d)]
                       + [f"slope{k + 1}" for k in range(d)] + [f"y_rate{k + 1}" for k in range(d)])
            for s in range(len(self)):
                w.writerow([f"{self.t_start[s]:.17g}", f"{self.t_end[s]:.17g}", int(self.J[s])]
                           + [f"{x:.17g}" for x in self.Z_start[s]]
                           + [f"{x:.17g}" for x in self.slope[s]]
                           + [f"{x:.17g}" for x in self.y_rate[s]])


def _regulated(model: MmfnModel, A) -> np.ndarray:
    reg = np.zeros(model.d, dtype=bool)
    for k in A:
        if not 1 <= k <= model.d:
            raise ValueError(f"station {k} out of range")
        reg[k - 1] = True
    return reg


def step(model: MmfnModel, state: PathState, rng: np.random.Generator, A=None):
    """One segment of the path from ``state``; returns ``(segment, new_state)``.

    The segment is a one-row :class:`Trajectory`.
    """
    A = range(1, model.d + 1) if A is None else A
    reg = _regulated(model, A)
    runner = _Runner(model, reg, state, rng, record=True)
    runner.run(np.inf, max_events=1)
    seg = Trajectory._from(runner, sorted(A))
    return seg, seg.final


def simulate(model: MmfnModel, horizon: float, seed: int = DEFAULT_SEED, z0=None, J0=None,
             record: bool = True) -> Trajectory:
    """Reflected path on ``[0, horizon]``; deterministic in ``(model, horizon, seed)``."""
    return simulate_partial(model, range(1, model.d + 1), horizon, seed, z0=z0, J0=J0, record=record)


def simulate_partial(model: MmfnModel, A, horizon: float, seed: int = DEFAULT_SEED, z0=None,
                     J0=None, record: bool = True) -> Trajectory:
    """Path reflected only on the stations in ``A`` (1-based); the others move freely."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    reg = _regulated(model, A)
    rng = replication_rng(seed, 0)
    state = initial_state(model, rng, z0, J0)
    runner = _Runner(model, reg, state, rng, record)
    runner.run(float(horizon))
    return Trajectory._from(runner, sorted(A))


# ---------------------------------------------------------------------------
# time scales and levels


def relaxation_time(model: MmfnModel) -> float:
    """Rough relaxation scale: the longest time to drain a typical buffer level
    plus the mixing time of the background chain."""
    from .geometry import ray_root

    rep = is_stable(model)
    if not rep.stable:
        raise PreconditionError("relaxation time needs a stable model")
    ev = np.sort(np.linalg.eigvals(model.Q).real)[::-1]
    mix = 1.0 / max(-ev[1], 1e-300) if model.m > 1 else 0.0
    drain = 0.0
    for k in range(model.d):
        eta = ray_root(model, np.eye(model.d)[k], u_max=1e6 / model.rate_scale)
        level = 1.0 / eta if np.isfinite(eta) and eta > 0 else 1.0 / model.rate_scale
        drain = max(drain, level / abs(rep.drift[k]))
    return float(drain + mix)


def default_levels(rate: float, reps: int, horizon: float, burn_in: float, tau: float,
                   n: int = 12) -> np.ndarray:
    """Levels from ``1/rate`` up to where ``exp(-rate x)`` meets the detection floor."""
    eff = reps * max(horizon - burn_in, 1e-300) / max(tau, 1e-300)
    floor = 25.0 / eff
    x_hi = np.log(1.0 / (4.0 * floor)) / rate
    x_lo = 1.0 / rate
    if x_hi <= x_lo:
        x_hi = 2.0 * x_lo
    return np.linspace(x_lo, x_hi, n)


# ---------------------------------------------------------------------------
# tail estimation


@dataclass(frozen=True)
class TailEstimate:
    c: tuple
    levels: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    used: np.ndarray  # levels that entered the fit
    slope: float
    slope_stderr: float
    ci: tuple  # 95% band for the slope
    reps: int
    horizon: float
    burn_in: float
    usable: bool
    monotone: bool  # p_hat nonincreasing up to 2 standard errors

    @property
    def decay_rate(self) -> float:
        return -self.slope

    def to_dict(self) -> dict:
        return {
            "c": list(self.c),
            "levels": self.levels.tolist(),
            "p_hat": self.p_hat.tolist(),
            "stderr": self.stderr.tolist(),
            "used": self.used.tolist(),
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "ci": list(self.ci),
            "decay_rate": self.decay_rate,
            "reps": self.reps,
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "usable": self.usable,
            "monotone": self.monotone,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "p_hat", "stderr"])
            for x, p, s in zip(self.levels, self.p_hat, self.stderr):
                w.writerow([f"{x:.17g}", f"{p:.17g}", f"{s:.17g}"])


def _wls_slope(x, logp, w):
    W = w.sum()
    xm = (w * x).sum() / W
    ym = (w * logp).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    return float((w * (x - xm) * (logp - ym)).sum() / sxx)


def _fit(levels, per_rep, floor):
    """Slope of log p_hat on x by weighted least squares, delete-one-group jackknife error."""
    reps = per_rep.shape[0]
    p = per_rep.mean(axis=0)
    se = per_rep.std(axis=0, ddof=1) / np.sqrt(reps) if reps > 1 else np.zeros_like(p)
    used = (p >= floor) & (p > 0) & (se > 0)
    if used.sum() < 2:
        return p, se, used, np.nan, np.nan
    w = (p[used] / se[used]) ** 2
    x = levels[used]
    slope = _wls_slope(x, np.log(p[used]), w)
    groups = min(reps, 20)
    idx = np.array_split(np.arange(reps), groups)
    jack = []
    for g in idx:
        keep = np.ones(reps, dtype=bool)
        keep[g] = False
        pg = per_rep[keep][:, used].mean(axis=0)
        if (pg <= 0).any():
            return p, se, used, slope, np.inf
        jack.append(_wls_slope(x, np.log(pg), w))
    jack = np.array(jack)
    jse = float(np.sqrt((groups - 1) / groups * ((jack - jack.mean()) ** 2).sum()))
    return p, se, used, slope, jse


def _burn(model, burn_in, horizon):
    if burn_in is None:
        burn_in = min(20.0 * relaxation_time(model), 0.5 * horizon)
    if not 0 <= burn_in < horizon:
        raise ValueError("need 0 <= burn_in < horizon")
    return float(burn_in)


def estimate_tails(model: MmfnModel, directions, levels, reps: int, horizon: float,
                   burn_in: float | None = None, seed: int = DEFAULT_SEED, threads=None,
                   bar_thetas=None):
    """Tail estimates for several directions from one set of replications.

    ``levels`` holds one increasing level array per direction.  With
    ``bar_thetas`` the same paths also accumulate the exponential moments
    used by :func:`estimate_bar_residual`; they are returned as the second
    element.
    """
    if not is_stable(model).stable:
        raise PreconditionError("tail estimation needs a stable model")
    d = model.d
    C = np.array([np.asarray(c, dtype=float) / np.linalg.norm(c) for c in directions]).reshape(-1, d)
    if (C < 0).any():
        raise PreconditionError("directions must be nonnegative")
    L = max(len(x) for x in levels)
    X = np.full((C.shape[0], L), np.inf)
    for i, x in enumerate(levels):
        x = np.asarray(x, dtype=float)
        if (np.diff(x) <= 0).any():
            raise ValueError("levels must be increasing")
        X[i, :len(x)] = x
    burn = _burn(model, burn_in, horizon)
    tau = relaxation_time(model)
    TH = np.zeros((0, d))
    H = np.zeros((0, model.m))
    if bar_thetas is not None:
        TH = np.array(bar_thetas, dtype=float).reshape(-1, d)
        H = np.array([perron(model, th).h for th in TH]).reshape(-1, model.m)
    reg = np.ones(d, dtype=bool)

    def one(r):
        rng = replication_rng(seed, r)
        st = initial_state(model, rng)
        run = _Runner(model, reg, st, rng, False, C=C, X=X, TH=TH, H=H, burn=burn)
        run.run(float(horizon))
        return run

    runs = _map_reps(one, reps, threads)
    span = horizon - burn
    occ = np.stack([r.occ for r in runs]) / span
    stats = runs[0].stats()
    for r in runs[1:]:
        stats = stats.merge(r.stats())
    eff = reps * span / tau
    floor = 25.0 / eff
    out = []
    for i in range(C.shape[0]):
        n = len(levels[i])
        lv = X[i, :n]
        p, se, used, slope, sse = _fit(lv, occ[:, i, :n], floor)
        usable = bool(np.isfinite(slope))
        mono = bool(all(p[j + 1] <= p[j] + 2 * max(se[j], se[j + 1]) for j in range(n - 1)))
        ci = (slope - 1.96 * sse, slope + 1.96 * sse) if usable else (np.nan, np.nan)
        out.append(TailEstimate(tuple(C[i].tolist()), lv.copy(), p, se, used, float(slope), float(sse),
                                tuple(float(x) for x in ci), reps, float(horizon), burn, usable, mono))
    extra = None
    if bar_thetas is not None:
        psi = np.stack([r.psi for r in runs]) / span
        psik = np.stack([r.psik for r in runs]) / span
        extra = [_bar_report(model, TH[i], psi[:, i], psik[:, i, :], reps, horizon, burn)
                 for i in range(TH.shape[0])]
    return out, extra, stats


def estimate_tail(model: MmfnModel, c, levels, reps: int, horizon: float,
                  burn_in: float | None = None, seed: int = DEFAULT_SEED, threads=None) -> TailEstimate:
    """Time-average estimate of ``P(<c, Z> > x)`` at each level with a fitted log-slope."""
    out, _, _ = estimate_tails(model, [c], [levels], reps, horizon, burn_in, seed, threads)
    return out[0]


# ---------------------------------------------------------------------------
# stationary identity check


@dataclass(frozen=True)
class BarResidual:
    theta: tuple
    gamma: float
    gamma_k: tuple
    psi: float
    psi_stderr: float
    psi_k: tuple
    residual: float
    residual_stderr: float
    normalized: float
    normalized_stderr: float
    reps: int

    @property
    def within(self) -> bool:
        """Residual within three standard errors of zero."""
        return abs(self.residual) <= 3.0 * self.residual_stderr

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _bar_report(model, theta, psi_r, psik_r, reps, horizon, burn) -> BarResidual:
    sp = perron(model, theta)
    gk = theta @ model.R
    res_r = sp.gamma * psi_r + psik_r @ gk
    psi = float(psi_r.mean())
    res = float(res_r.mean())
    se = float(res_r.std(ddof=1) / np.sqrt(reps)) if reps > 1 else np.inf
    scale = abs(sp.gamma * psi)
    if scale == 0.0:
        # at theta = 0 the scale is set by the boundary terms
        scale = max(float(np.abs(psik_r.mean(axis=0)).max()), 1e-300)
    return BarResidual(
        theta=tuple(float(x) for x in theta),
        gamma=float(sp.gamma),
        gamma_k=tuple(float(x) for x in gk),
        psi=psi,
        psi_stderr=float(psi_r.std(ddof=1) / np.sqrt(reps)) if reps > 1 else np.inf,
        psi_k=tuple(float(x) for x in psik_r.mean(axis=0)),
        residual=res,
        residual_stderr=se,
        normalized=res / scale,
        normalized_stderr=se / scale,
        reps=reps,
    )


def estimate_bar_residual(model: MmfnModel, theta, reps: int, horizon: float,
                          burn_in: float | None = None, seed: int = DEFAULT_SEED, threads=None,
                          grid=None) -> BarResidual:
    """Empirical ``gamma psi + sum_k gamma_k psi_k`` at theta with its standard error.

    With a :class:`~mmfn.geometry.DomainGrid` the point is checked against
    D^(max) first; outside it a warning is issued since the moments may be
    infinite.
    """
    theta = np.asarray(theta, dtype=float)
    if grid is not None and not grid.contains(theta):
        import warnings

        warnings.warn("theta is not inside D^(max): the moments may be infinite", RuntimeWarning)
    _, bars, _ = estimate_tails(model, [np.ones(model.d)], [[np.inf]], reps, horizon, burn_in,
                                seed, threads, bar_thetas=[theta])
    return bars[0]


# ---------------------------------------------------------------------------
# exponential martingale


@dataclass(frozen=True)
class MartingaleReport:
    theta: tuple
    t: float
    mean: float
    stderr: float
    reps: int
    rejected: int
    valid: bool  # at most 1% of replications overflowed

    @property
    def passed(self) -> bool:
        if not self.valid:
            return False
        if self.stderr == 0.0:
            return abs(self.mean - 1.0) <= 1e-12
        return abs(self.mean - 1.0) <= 3.0 * self.stderr

    def to_dict(self) -> dict:
        return {"theta": list(self.theta), "t": self.t, "mean": self.mean, "stderr": self.stderr,
                "reps": self.reps, "rejected": self.rejected, "valid": self.valid, "passed": self.passed}


def martingale_check(model: MmfnModel, theta, t: float, reps: int, seed: int = DEFAULT_SEED,
                     z0=None, threads=None, twisted: bool = False) -> MartingaleReport:
    """Sample mean of ``E^theta(t)``, which has expectation one for every theta.

    With ``twisted`` the paths follow ``twisted_model(theta)`` and the
    statistic is ``1 / E^theta(t)``, whose mean is one under the twisted
    measure.
    """
    from .spectral import twisted_model

    theta = np.asarray(theta, dtype=float)
    sp = perron(model, theta)
    gk = theta @ model.R
    logh = np.log(sp.h)
    reg = np.ones(model.d, dtype=bool)
    sim = twisted_model(model, theta) if twisted else model
    sign = -1.0 if twisted else 1.0

    def one(r):
        rng = replication_rng(seed, r)
        st = initial_state(sim, rng, z0)
        run = _Runner(sim, reg, st, rng, False)
        run.run(float(t))
        fin = run.state()
        return sign * (theta @ (fin.Z - st.Z) + logh[fin.J - 1] - logh[st.J - 1]
                       - sp.gamma * t - gk @ fin.Y)

    logs = np.array(_map_reps(one, reps, threads))
    ok = np.abs(logs) < 700.0  # beyond this exp over- or underflows
    vals = np.exp(logs[ok])
    n = int(ok.sum())
    mean = float(vals.mean()) if n else np.nan
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else np.inf
    rejected = reps - n
    return MartingaleReport(tuple(theta.tolist()), float(t), mean, se, reps, rejected,
                            rejected <= 0.01 * reps)


@dataclass(frozen=True)
class DriftCheck:
    theta: tuple
    empirical: np.ndarray
    stderr: np.ndarray
    predicted: np.ndarray

    @property
    def passed(self) -> bool:
        return bool((np.abs(self.empirical - self.predicted) <= 3.0 * self.stderr).all())


def twisted_drift_check(model: MmfnModel, theta, horizon: float, reps: int,
                        seed: int = DEFAULT_SEED, threads=None) -> DriftCheck:
    """Drift of the free process ``V`` under the twisted background against ``grad gamma(theta)``."""
    from .spectral import twisted_model

    tm = twisted_model(model, theta)
    reg = np.zeros(model.d, dtype=bool)

    def one(r):
        rng = replication_rng(seed, r)
        st = initial_state(tm, rng)
        run = _Runner(tm, reg, st, rng, False)
        run.run(float(horizon))
        return run.state().Z / horizon

    slopes = np.array(_map_reps(one, reps, threads))
    return DriftCheck(tuple(np.asarray(theta, dtype=float).tolist()), slopes.mean(axis=0),
                      slopes.std(axis=0, ddof=1) / np.sqrt(reps), perron(model, theta).grad)


# ---------------------------------------------------------------------------
# partial reflection


def partial_slopes(model: MmfnModel, A) -> np.ndarray:
    """Fluid-limit slopes of the path reflected on ``A`` only.

    The scaled path solves the Skorohod problem for the constant drift
    ``v_bar``: on ``A`` find ``w, y >= 0`` with ``w = v_bar_A + R_A y`` and
    ``w . y = 0``; off ``A`` the slope is ``v_bar - P^T_{A^c, A} y``.  When the
    stations in ``A`` are stable on their own, ``y = -R_A^{-1} v_bar_A``.
    """
    vbar = model.v @ stationary_background(model.Q)
    idx = np.array(sorted(k - 1 for k in A), dtype=int)
    d = model.d
    y = np.zeros(d)
    if idx.size:
        PA = model.P[np.ix_(idx, idx)]
        y[idx] = _lcp(vbar[idx], PA)
    return vbar + model.R @ y


def _lcp(vA: np.ndarray, PA: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Least ``y >= 0`` with ``v + (I - P^T) y >= 0`` and complementarity, by monotone iteration
    from zero followed by an exact solve on the support."""
    n = vA.shape[0]
    y = np.zeros(n)
    scale = max(np.abs(vA).max(), 1e-300)
    for _ in range(100000):
        new = np.maximum(0.0, -vA + PA.T @ y)
        if np.abs(new - y).max() <= tol * scale:
            y = new
            break
        y = new
    else:
        raise ConvergenceError("partial-reflection slope iteration did not converge")
    pos = y > 0
    if pos.any():
        M = np.eye(n) - PA.T
        sol = np.linalg.solve(M[np.ix_(pos, pos)], -vA[pos])
        cand = np.zeros(n)
        cand[pos] = sol
        w = vA + M @ cand
        if (cand >= 0).all() and (w >= -1e-12 * scale).all():
            y = cand
    return y


@dataclass(frozen=True)
class PartialSlopeCheck:
    A: tuple
    predicted: np.ndarray
    empirical: np.ndarray
    stderr: np.ndarray
    witness: int | None  # 1-based station in A^c with a matching negative slope

    @property
    def passed(self) -> bool:
        return self.witness is not None


def partial_slope_check(model: MmfnModel, A, horizon: float, reps: int,
                        seed: int = DEFAULT_SEED, threads=None) -> PartialSlopeCheck:
    """Long-run slopes of the partially reflected path against the fluid prediction.

    Slopes are measured over the second half of each path to shed the
    start-up transient.
    """
    A = sorted(A)
    reg = _regulated(model, A)
    pred = partial_slopes(model, A)

    def one(r):
        rng = replication_rng(seed, r)
        st = initial_state(model, rng)
        run = _Runner(model, reg, st, rng, False)
        run.run(0.5 * horizon)
        z_mid = run.Z.copy()
        run.run(float(horizon))
        return (run.Z - z_mid) / (0.5 * horizon)

    s = np.array(_map_reps(one, reps, threads))
    emp = s.mean(axis=0)
    se = s.std(axis=0, ddof=1) / np.sqrt(reps)
    witness = None
    for k in range(model.d):
        if k + 1 in A:
            continue
        if pred[k] < 0 and abs(emp[k] - pred[k]) <= 3.0 * se[k]:
            witness = k + 1
            break
    return PartialSlopeCheck(tuple(A), pred, emp, se, witness)

