import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmfn.errors import ModelStructureError
from mmfn.model import MmfnModel
from mmfn.reference import random_model, tandem
from mmfn.traffic import (capped_flow, is_stable, linear_traffic, nonlinear_traffic, solve_traffic,
                          stable_stations, stationary_background)

from strategies import generators, models

Q2 = [[-1.0, 1.0], [1.0, -1.0]]


def _null_space_pi(Q):
    m = Q.shape[0]
    A = np.vstack([Q.T, np.ones(m)])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def test_stationary_two_state():
    np.testing.assert_allclose(stationary_background(Q2), [0.5, 0.5], rtol=1e-15)
    np.testing.assert_allclose(stationary_background([[-2.0, 2.0], [1.0, -1.0]]), [1 / 3, 2 / 3],
                               rtol=1e-15)


def test_stationary_rejects_non_generator():
    with pytest.raises(ModelStructureError):
        stationary_background([[-1.0, 2.0], [1.0, -1.0]])
    with pytest.raises(ModelStructureError):
        stationary_background([[-1.0, 1.0], [0.0, 0.0]])


@given(generators())
def test_stationary_matches_null_space(Q):
    pi = stationary_background(Q)
    assert (pi > 0).all()
    np.testing.assert_allclose(pi, _null_space_pi(Q), rtol=1e-9, atol=1e-13)
    assert np.abs(pi @ Q).max() <= 1e-12 * np.abs(Q).max()


def test_linear_traffic_examples():
    m = MmfnModel([[1.0, 0.5], [0.2, 0.3]], [[2.0, 2.0]] * 2, np.zeros((2, 2)), Q2)
    alpha, _ = linear_traffic(m)
    np.testing.assert_allclose(alpha, m.lam)
    alpha, _ = linear_traffic(tandem())
    np.testing.assert_allclose(alpha[1], alpha[0])
    np.testing.assert_allclose(alpha[0], tandem().lam[0])


@given(models(d=(3, 3), m=(2, 3)))
def test_linear_traffic_solves_balance(m):
    alpha, _ = linear_traffic(m)
    for i in range(m.m):
        np.testing.assert_allclose((np.eye(m.d) - m.P.T) @ alpha[:, i], m.lam[:, i], atol=1e-12)


def test_nonlinear_equals_linear_when_all_stable():
    m = MmfnModel([[0.5, 0.4], [0.1, 0.2]], [[2.0, 2.0]] * 2, [[0.0, 0.5], [0.0, 0.0]], Q2)
    np.testing.assert_allclose(nonlinear_traffic(m), linear_traffic(m)[0], atol=1e-14)


def test_nonlinear_upstream_saturates():
    m = MmfnModel([[3.0, 2.5], [0.0, 0.0]], [[1.0, 1.5], [5.0, 5.0]], [[0.0, 1.0], [0.0, 0.0]], Q2)
    a = nonlinear_traffic(m)
    np.testing.assert_allclose(a[1], m.mu[0], atol=1e-14)


def _picard_oracle(m):
    alpha = linear_traffic(m)[0]
    out = np.empty_like(alpha)
    for i in range(m.m):
        b = alpha[:, i].copy()
        for _ in range(10_000):
            b = np.minimum(m.mu[:, i], m.lam[:, i] + m.P.T @ b)
        out[:, i] = m.lam[:, i] + m.P.T @ b
    return np.minimum(out, alpha)


@given(st.integers(0, 10_000))
def test_nonlinear_matches_picard_oracle(seed):
    m = random_model(np.random.default_rng(seed), 3, 2, stable=False)
    np.testing.assert_allclose(nonlinear_traffic(m), _picard_oracle(m), atol=1e-10)


@given(models(d=(2, 4), m=(2, 3), stable=False))
def test_capped_flow_is_fixed_point(m):
    for i in range(m.m):
        capped = np.ones(m.d, dtype=bool)
        b = capped_flow(m.lam[:, i], m.mu[:, i], m.P, capped)
        np.testing.assert_allclose(b, np.minimum(m.mu[:, i], m.lam[:, i] + m.P.T @ b), atol=1e-12)
        assert (b >= 0).all()


def test_stability_examples():
    neg = MmfnModel([[0.5, 0.4], [0.1, 0.2]], [[2.0, 2.0]] * 2, np.zeros((2, 2)), Q2)
    assert is_stable(neg).stable
    zero = MmfnModel([[1.0, 1.0], [1.0, 1.0]], [[1.0, 1.0]] * 2, np.zeros((2, 2)), Q2)
    rep = is_stable(zero)
    assert not rep.stable and rep.marginal
    over = MmfnModel([[2.0, 2.0], [0.0, 0.0]], [[3.0, 3.0], [1.0, 1.0]], [[0.0, 1.0], [0.0, 0.0]], Q2)
    rep = is_stable(over)
    assert not rep.stable and rep.drift[1] > 0


@given(models(d=(2, 4), m=(2, 4)))
def test_stability_forms_agree(m):
    rep = is_stable(m)
    assert rep.stable
    assert rep.agreement <= 1e-10 * max(m.rate_scale, 1.0)
    assert stable_stations(m)[0] == set(range(1, m.d + 1))


def test_stable_stations_tandem():
    up = MmfnModel([[2.0, 2.0], [0.0, 0.0]], [[1.0, 1.0], [1.5, 1.5]], [[0.0, 1.0], [0.0, 0.0]], Q2)
    assert stable_stations(up)[0] == {2}
    both = MmfnModel([[2.0, 2.0], [0.0, 0.0]], [[1.0, 1.0], [0.5, 0.5]], [[0.0, 1.0], [0.0, 0.0]], Q2)
    assert stable_stations(both)[0] == set()


def test_solve_traffic_means():
    t = solve_traffic(tandem())
    np.testing.assert_allclose(t.pi, [0.5, 0.5])
    np.testing.assert_allclose(t.v_bar, tandem().v @ t.pi)
    np.testing.assert_allclose(t.alpha_bar - t.mu_bar, tandem().R_inv @ t.v_bar, atol=1e-14)
