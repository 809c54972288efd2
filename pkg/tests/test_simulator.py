import numpy as np
import pytest
from hypothesis import given, settings

from mmfn.errors import PreconditionError
from mmfn.model import MmfnModel
from mmfn.reference import feedback, parallel, random_model, tandem
from mmfn.simulator import (PathState, estimate_bar_residual, estimate_tail, initial_state,
                            martingale_check, partial_slope_check, partial_slopes, release_rates,
                            replication_rng, simulate, simulate_partial, step, twisted_drift_check)
from mmfn.traffic import is_stable, stationary_background

from strategies import models


def unstable_tandem():
    return MmfnModel(lam=[[2.0, 1.8], [0.0, 0.0]], mu=[[1.5, 1.5], [1.1, 2.6]],
                     P=[[0.0, 1.0], [0.0, 0.0]], Q=[[-1.0, 1.0], [1.0, -1.0]])


# ---------------------------------------------------------------------------
# release rates


@settings(max_examples=25)
@given(models())
def test_release_all_positive_is_mu(model):
    for J in range(1, model.m + 1):
        b = release_rates(model, J, range(1, model.d + 1))
        assert np.array_equal(b, model.mu[:, J - 1])


def test_release_without_routing_is_min():
    m = parallel()
    for J in (1, 2):
        assert np.allclose(release_rates(m, J, []), np.minimum(m.lam[:, J - 1], m.mu[:, J - 1]))


def test_release_tandem_both_empty():
    m = tandem()
    # state 2: station 1 passes lam = 0.2 on, station 2 passes it through
    assert np.allclose(release_rates(m, 2, []), [0.2, 0.2])
    # state 1: station 1 is overloaded and releases at mu, station 2 gets 1.5 > 1.1
    assert np.allclose(release_rates(m, 1, []), [1.5, 1.1])


@settings(max_examples=25)
@given(models())
def test_release_fixed_point(model):
    for J in range(1, model.m + 1):
        for S in ([], [1], list(range(2, model.d + 1))):
            b = release_rates(model, J, S)
            a = model.lam[:, J - 1] + model.P.T @ b
            empty = np.ones(model.d, dtype=bool)
            empty[[k - 1 for k in S]] = False
            target = np.where(empty, np.minimum(model.mu[:, J - 1], a), model.mu[:, J - 1])
            assert (b >= 0).all()
            assert np.allclose(b, target, atol=1e-10 * model.rate_scale)


def test_release_bad_arguments():
    with pytest.raises(ValueError):
        release_rates(tandem(), 3, [])
    with pytest.raises(ValueError):
        release_rates(tandem(), 1, [5])


# ---------------------------------------------------------------------------
# paths


def test_interior_step_is_linear():
    m = tandem()
    rng = replication_rng(1, 0)
    st = PathState(t=0.0, Z=np.array([5.0, 5.0]), Y=np.zeros(2), J=1)
    seg, new = step(m, st, rng)
    assert len(seg) == 1
    assert np.allclose(seg.slope[0], m.v[:, 0])
    dt = new.t - st.t
    assert np.allclose(new.Z, st.Z + dt * m.v[:, 0])
    assert np.array_equal(new.Y, np.zeros(2))


def test_step_stops_at_boundary_hit():
    m = tandem()
    # station 2 drains at 1.5 - 2.6 < 0 in state 2 and hits zero after a short time
    st = PathState(t=0.0, Z=np.array([5.0, 1e-3]), Y=np.zeros(2), J=2, t_jump=10.0)
    seg, new = step(m, st, replication_rng(1, 0))
    assert new.Z[1] == 0.0 and new.Z[0] > 0
    assert new.t == pytest.approx(1e-3 / (2.6 - 1.5))


@pytest.mark.parametrize("make", [tandem, feedback, parallel])
def test_reflection_identity_and_invariants(make):
    m = make()
    tr = simulate(m, 2000.0, seed=3)
    st = tr.stats
    assert st.events > 1000
    assert st.violations == 0
    fin = tr.final
    assert np.allclose(fin.Z, fin.Z0 + fin.V + m.R @ fin.Y, rtol=0, atol=1e-9 * (1 + np.abs(fin.Z).max()))
    # Y only grows on empty segments
    assert (tr.y_rate >= 0).all()
    assert ((tr.y_rate == 0) | (tr.Z_start == 0)).all()
    assert (tr.Z_start >= -1e-12).all()


def test_simulate_is_deterministic():
    m = feedback()
    a = simulate(m, 500.0, seed=11)
    b = simulate(m, 500.0, seed=11)
    c = simulate(m, 500.0, seed=12)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_step_chain_matches_simulate():
    m = tandem()
    tr = simulate(m, 50.0, seed=4)
    rng = replication_rng(4, 0)
    st = initial_state(m, rng)
    for s in range(len(tr) - 1):
        seg, st = step(m, st, rng)
        assert seg.t_start[0] == tr.t_start[s]
        assert np.array_equal(seg.Z_start[0], tr.Z_start[s])


def test_partial_with_all_stations_equals_simulate():
    m = feedback()
    assert simulate_partial(m, [1, 2], 300.0, seed=5).digest() == simulate(m, 300.0, seed=5).digest()


def test_partial_with_no_station_is_free_process():
    m = tandem()
    tr = simulate_partial(m, [], 300.0, seed=6, z0=[1.0, 2.0])
    fin = tr.final
    assert np.array_equal(fin.Y, np.zeros(2))
    assert np.allclose(fin.Z, fin.Z0 + fin.V, atol=1e-9 * (1 + np.abs(fin.Z).max()))


def test_empty_fraction_and_unstable_growth():
    tr = simulate(tandem(), 5000.0, seed=7)
    frac = tr.time_empty_fraction()
    assert (frac > 0).all() and (frac < 1).all()
    m = unstable_tandem()
    tr = simulate(m, 5000.0, seed=7, record=False)
    drift = is_stable(m).drift
    k = int(np.argmax(drift))
    assert drift[k] > 0
    assert tr.final.Z[k] / 5000.0 == pytest.approx(drift[k], rel=0.1)


def test_livelock_free_on_random_models():
    rng = np.random.default_rng(8)
    for _ in range(10):
        m = random_model(rng, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        tr = simulate(m, 200.0, seed=int(rng.integers(1 << 30)), record=False)
        assert tr.stats.violations == 0


def test_trajectory_csv(tmp_path):
    tr = simulate(tandem(), 20.0, seed=1)
    path = tmp_path / "t.csv"
    tr.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:4] == ["t_start", "t_end", "J", "Z1"]
    assert len(lines) == len(tr) + 1


# ---------------------------------------------------------------------------
# estimators


def test_tail_estimates_are_probabilities():
    est = estimate_tail(tandem(), [1, 0], [0.0, 1.0, 2.0, 3.0], reps=20, horizon=2000.0, seed=2)
    assert (est.p_hat > 0).all() and (est.p_hat < 1).all()
    assert (np.diff(est.p_hat) <= 0).all()
    assert est.usable and est.decay_rate > 0


def test_tail_stderr_scales_with_reps():
    m = tandem()
    levels = [1.0, 2.0]
    a = estimate_tail(m, [1, 0], levels, reps=100, horizon=2000.0, seed=21)
    b = estimate_tail(m, [1, 0], levels, reps=400, horizon=2000.0, seed=22)
    ratio = a.stderr / b.stderr
    assert np.all(np.abs(ratio - 2.0) <= 0.3 * 2.0)


def test_tail_requires_stability():
    with pytest.raises(PreconditionError):
        estimate_tail(unstable_tandem(), [1, 0], [1.0], reps=2, horizon=10.0)


@pytest.mark.parametrize("make", [tandem, feedback, parallel])
def test_bar_at_zero(make):
    m = make()
    bar = estimate_bar_residual(m, [0.0, 0.0], reps=20, horizon=5000.0, seed=3)
    assert bar.psi == pytest.approx(1.0)
    assert bar.residual == 0.0
    # psi_k at 0 is the long-run rate of Y_k, which is -[R^-1 v_bar]_k
    vbar = m.v @ stationary_background(m.Q)
    assert np.allclose(bar.psi_k, -np.linalg.solve(m.R, vbar), rtol=0.05)


def test_bar_residual_inside_domain():
    bar = estimate_bar_residual(feedback(), [0.2, 0.2], reps=40, horizon=5000.0, seed=4)
    assert bar.within
    assert bar.normalized_stderr < 0.05


def test_martingale_at_zero_is_exact():
    r = martingale_check(tandem(), [0.0, 0.0], 10.0, 50, seed=1)
    assert r.mean == 1.0 and r.stderr == 0.0 and r.passed


@pytest.mark.parametrize("twisted", [False, True])
def test_martingale_moderate_theta(twisted):
    r = martingale_check(parallel(), [0.2, 0.3], 10.0, 2000, seed=2, twisted=twisted)
    assert r.valid and r.passed


def test_martingale_rejects_overflow():
    r = martingale_check(tandem(), [300.0, 300.0], 10.0, 20, seed=1)
    assert r.rejected > 0 and not r.valid and not r.passed


def test_twisted_drift_matches_gradient():
    chk = twisted_drift_check(feedback(), [0.3, -0.1], 500.0, 40, seed=5)
    assert chk.passed


# ---------------------------------------------------------------------------
# partial reflection


def test_partial_slopes_limits():
    m = tandem()
    vbar = m.v @ stationary_background(m.Q)
    assert np.allclose(partial_slopes(m, []), vbar)
    # fully reflected stable network: no net growth anywhere
    assert np.allclose(partial_slopes(m, [1, 2]), 0.0, atol=1e-12)


def test_partial_slopes_complementarity():
    rng = np.random.default_rng(9)
    for _ in range(20):
        m = random_model(rng, 3, 2)
        A = [1, 3]
        s = partial_slopes(m, A)
        # reflected stations have nonnegative slope; here the stable network makes them zero
        assert (s[[0, 2]] >= -1e-12).all()


def test_partial_slope_check_tandem():
    # regulating station 2 only leaves station 1 free with slope v_bar_1 < 0
    chk = partial_slope_check(tandem(), [2], 2000.0, 20, seed=3)
    assert chk.witness == 1
    assert chk.predicted[0] < 0
