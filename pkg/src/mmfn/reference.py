"""Hand-built two-station reference models with two background states."""
from __future__ import annotations

import numpy as np

from .model import MmfnModel, validate_model
from .traffic import is_stable, solve_traffic

__all__ = ["tandem", "feedback", "parallel", "REFERENCE_MODELS", "random_model"]

_Q = [[-1.0, 1.0], [1.0, -1.0]]


def tandem() -> MmfnModel:
    """Station 1 feeds station 2; only station 1 has exogenous input."""
    return MmfnModel(
        lam=[[2.0, 0.2], [0.0, 0.0]],
        mu=[[1.5, 1.5], [1.1, 2.6]],
        P=[[0.0, 1.0], [0.0, 0.0]],
        Q=_Q,
    )


def feedback() -> MmfnModel:
    """Two stations routing part of their output to each other."""
    return MmfnModel(
        lam=[[1.9, 0.2], [1.4, 0.1]],
        mu=[[2.0, 2.0], [2.0, 2.0]],
        P=[[0.0, 0.5], [0.3, 0.0]],
        Q=_Q,
    )


def parallel() -> MmfnModel:
    """Independent routing, stations coupled only through the background."""
    return MmfnModel(
        lam=[[1.7, 0.2], [1.5, 0.4]],
        mu=[[1.2, 1.2], [1.2, 1.2]],
        P=[[0.0, 0.0], [0.0, 0.0]],
        Q=_Q,
    )


REFERENCE_MODELS = {"tandem": tandem, "feedback": feedback, "parallel": parallel}


def random_model(rng: np.random.Generator, d: int = 2, m: int = 2, stable: bool = True,
                 burst: bool = False, max_tries: int = 1000) -> MmfnModel:
    """A random valid model; with ``stable`` the load is drawn below capacity.

    Routing rows sum to at most 0.7, every station has some exogenous input
    and background rates lie in [0.3, 2].  With ``burst`` some background
    state fills every buffer at once, which keeps the negative set of gamma
    bounded inside the nonnegative orthant.
    """
    for _ in range(max_tries):
        Q = rng.uniform(0.3, 2.0, (m, m)) * (rng.random((m, m)) < 0.8)
        np.fill_diagonal(Q, 0.0)
        Q[np.arange(m), (np.arange(m) + 1) % m] += 0.3  # a cycle keeps Q irreducible
        Q -= np.diag(Q.sum(axis=1))
        P = rng.random((d, d)) * (rng.random((d, d)) < 0.6)
        np.fill_diagonal(P, 0.0)
        rows = P.sum(axis=1)
        P *= np.where(rows > 0, rng.uniform(0.1, 0.7, d) / np.maximum(rows, 1e-300), 0.0)[:, None]
        mu = rng.uniform(1.0, 3.0, (d, m))
        lam = rng.uniform(0.0, 1.0, (d, m)) ** 2 * 3.0
        lam[:, rng.integers(m)] += 0.2
        model = MmfnModel(lam, mu, P, Q)
        if not validate_model(model).ok:
            continue
        t = solve_traffic(model)
        load = (t.alpha_bar / t.mu_bar).max()
        if stable:
            target = rng.uniform(0.3, 0.85)
        else:
            target = rng.uniform(1.1, 1.6)
        model = MmfnModel(lam * target / load, mu, P, Q)
        if burst and not (model.v > 0).all(axis=0).any():
            continue
        if is_stable(model).stable == stable:
            return model
    raise RuntimeError("could not draw a random model")
