import csv
import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmfn.errors import DirectionOutsideCorn, PreconditionError
from mmfn.geometry import (BoundingBox, DecayReport, auto_box, boundary_points, bracket_verdict, classify,
                           decay_report, downclose, fixed_point_iteration, in_corn,
                           lower_decay_rate_coordinate, lower_decay_rate_direction, ray_root, two_d_exact,
                           upper_decay_rate, write_boundary_csv, write_grid_csv)
from mmfn.model import MmfnModel
from mmfn.reference import REFERENCE_MODELS, feedback, parallel, random_model, tandem
from mmfn.spectral import gamma, gamma_batch, perron
from mmfn.traffic import stationary_background

from strategies import models

Q2 = [[-1.0, 1.0], [1.0, -1.0]]
# station 1 fills in state 1, station 2 drains in every state
DRAIN_LAM = [[2.2, 0.3], [0.2, 0.3]]
DRAIN_MU = [[1.5, 1.5], [1.0, 1.0]]


@pytest.fixture(scope="module")
def grids():
    out = {}
    for name, f in REFERENCE_MODELS.items():
        m = f()
        out[name] = (m, fixed_point_iteration(m, auto_box(m)))
    return out


def _brute_downclose(mask):
    out = np.zeros_like(mask)
    for idx in itertools.product(*[range(n) for n in mask.shape]):
        sl = tuple(slice(i, None) for i in idx)
        out[idx] = mask[sl].any()
    return out


@given(arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))))
def test_downclose_matches_brute_force(mask):
    np.testing.assert_array_equal(downclose(mask), _brute_downclose(mask))


def test_classify_origin_is_boundary():
    mem = classify(tandem(), [0.0, 0.0], A=(1,))
    assert mem.gamma_minus is None and mem.gamma_plus is None
    assert mem.gamma_minus_A is None and mem.gamma_plus_A is None


def test_classify_small_step_down_the_drift():
    for f in REFERENCE_MODELS.values():
        m = f()
        for k in range(m.d):
            th = 1e-3 * m.R_inv[k]
            assert classify(m, th).gamma_minus is True


def test_classify_subset_conditions():
    m = tandem()
    th = np.array([0.2, 0.5])  # gamma_1 = -0.3, gamma_2 = 0.5
    assert gamma(m, th) < 0
    assert classify(m, th, A=(1,)).gamma_minus_A is True
    assert classify(m, th, A=(2,)).gamma_minus_A is False
    assert classify(m, th, A=(1, 2)).gamma_plus_A is False


def test_aligned_box_contains_origin():
    box = BoundingBox.aligned([-0.33, -1.0], [1.7, 2.2], 50)
    pts = box.points()
    assert np.abs(pts[box.origin_index()]).max() < 1e-12
    assert (box.lo <= 0).all() and (box.hi >= 0).all()
    with pytest.raises(ValueError):
        BoundingBox([1.0], [0.0], [3])


def test_auto_box_symmetric_model():
    m = MmfnModel([[1.2, 0.3], [1.2, 0.3]], [[1.5, 1.5], [1.5, 1.5]], np.zeros((2, 2)), Q2)
    box = auto_box(m)
    np.testing.assert_allclose(box.lo[0], box.lo[1])
    np.testing.assert_allclose(box.hi[0], box.hi[1])


def test_auto_box_flags_always_draining_station():
    m = MmfnModel(DRAIN_LAM, DRAIN_MU, np.zeros((2, 2)), Q2)
    assert (m.v[1] < 0).all()
    assert 2 in auto_box(m).truncated


def test_auto_box_rejects_unstable():
    m = MmfnModel([[3.0, 3.0], [0.2, 0.3]], [[1.5, 1.5], [1.0, 1.0]], np.zeros((2, 2)), Q2)
    with pytest.raises(PreconditionError):
        auto_box(m)


def test_fixed_point_sets_are_down_sets(grids):
    for m, g in grids.values():
        for D in g.Dk:
            np.testing.assert_array_equal(D, downclose(D))
        np.testing.assert_array_equal(g.Dmax, downclose(g.Dmax))
        # each sweep can only grow the sets
        tr = np.array(g.trace)
        assert (np.diff(tr, axis=0) >= 0).all()
        assert g.contains(np.zeros(2))


def test_dmax_inside_down_gamma_minus(grids):
    for m, g in grids.values():
        pts = g.box.points()[g.Dmax]
        # every D^(max) point is dominated by a point with gamma < 0
        h = g.box.resolution
        for p in pts[:: max(len(pts) // 200, 1)]:
            assert (gamma_batch(m, p + h * np.array([[0, 0]])) < 0).any() or \
                   any(gamma(m, p + t * e) < 0 for e in np.eye(2) for t in np.linspace(0, 50, 2001))


def test_gamma_minus_lattice_convexity(grids):
    rng = np.random.default_rng(0)
    for m, g in grids.values():
        idx = np.argwhere(g.gamma_minus)
        pts = g.box.points()
        for _ in range(300):
            a, b = idx[rng.integers(len(idx), size=2)]
            th = pts[tuple((a + b) // 2)]
            assert gamma(m, th) < 1e-12 * m.rate_scale * (1 + np.abs(th).max())


def test_two_d_exact_symmetric_model():
    m = MmfnModel([[2.0, 0.3], [2.0, 0.3]], [[1.5, 1.5], [1.5, 1.5]],
                  [[0.0, 0.2], [0.2, 0.0]], Q2)
    ex = two_d_exact(m)
    assert ex.alpha[0] == pytest.approx(ex.alpha[1], rel=1e-9)


def test_two_d_exact_history_monotone():
    rng = np.random.default_rng(4)
    for _ in range(5):
        ex = two_d_exact(random_model(rng, 2, 3))
        for a, b in zip(ex.history, ex.history[1:]):
            assert b[0] >= a[0] - 1e-12 and b[1] >= a[1] - 1e-12


def test_two_d_exact_decoupled_grid_oracle():
    # P = 0: gamma_k = theta_k, so alpha_1 = sup{theta_1 : gamma(theta) < 0, theta_2 < 0}
    m = parallel()
    ex = two_d_exact(m)
    t1 = np.linspace(0.0, 3.0, 2000)
    t2 = np.linspace(-20.0, 0.0, 2000, endpoint=False)
    P = np.stack(np.meshgrid(t1, t2, indexing="ij"), axis=-1)
    neg = gamma_batch(m, P) < 0
    oracle = t1[neg.any(axis=1)].max()
    assert abs(ex.alpha[0] - oracle) <= 2 * (t1[1] - t1[0])


def test_upper_bound_ray_below_hyperplane(grids):
    for m, g in grids.values():
        for c in ([1, 0], [0, 1], [1, 1], [1, 3]):
            ub = upper_decay_rate(m, c, g)
            assert ub.ray <= ub.hyperplane + 1e-12


def test_upper_bound_hyperplane_matches_exact_alpha():
    rng = np.random.default_rng(11)
    for _ in range(6):
        m = random_model(rng, 2, 2, burst=True)
        g = fixed_point_iteration(m)
        ex = two_d_exact(m)
        for k in range(2):
            if not np.isfinite(ex.alpha[k]) or ex.alpha[k] >= g.box.hi[k]:
                continue
            ub = upper_decay_rate(m, np.eye(2)[k], g)
            assert abs(ub.hyperplane - ex.alpha[k]) <= 2 * g.box.resolution[k]


def test_upper_bound_three_station_lattice_oracle():
    m = MmfnModel([[1.6, 0.2], [0.0, 0.0], [0.0, 0.0]], [[1.3, 1.3], [1.1, 2.4], [1.2, 2.5]],
                  [[0, 1.0, 0], [0, 0, 1.0], [0, 0, 0]], Q2)
    g = fixed_point_iteration(m)
    pts = g.box.points()
    for c in ([1, 0, 0], [0, 0, 1], [1, 1, 1]):
        c = np.asarray(c, float) / np.linalg.norm(c)
        ub = upper_decay_rate(m, c, g)
        best = max(float(p @ c) for p in pts[g.Dmax])
        assert ub.hyperplane == pytest.approx(best, abs=1e-12)
        # the ray bound stays within a lattice diagonal of the dominated lattice points
        on_ray = [a for a in np.linspace(0, g.box.hi.max(), 4000) if g.contains(a * c)]
        assert abs(ub.ray - max(on_ray)) <= ub.ray_err


def test_upper_bound_rejects_bad_direction(grids):
    m, g = grids["tandem"]
    with pytest.raises(PreconditionError):
        upper_decay_rate(m, [1.0, -0.1], g)
    with pytest.raises(PreconditionError):
        lower_decay_rate_direction(m, [-1.0, 1.0])


def test_direction_root_bisection_oracle():
    for f in REFERENCE_MODELS.values():
        m = f()
        c = np.array([1.0, 1.0]) / np.sqrt(2)
        lb = lower_decay_rate_direction(m, c)
        lo, hi = 1e-6, 100.0
        assert gamma(m, lo * c) < 0 < gamma(m, hi * c)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if gamma(m, mid * c) < 0:
                lo = mid
            else:
                hi = mid
        assert lb.value == pytest.approx(lo, abs=1e-9)
        assert lb.value == pytest.approx(ray_root(m, c), abs=1e-12)


def test_direction_outside_corn():
    # station 2 always drains: gamma stays negative along e_2
    m = MmfnModel(DRAIN_LAM, DRAIN_MU, np.zeros((2, 2)), Q2)
    with pytest.raises(DirectionOutsideCorn):
        lower_decay_rate_direction(m, [0.0, 1.0])
    assert not in_corn(m, [0.0, 1.0])
    # along e_1 the crossing point has d gamma / d theta_2 < 0, so it is not on
    # the upper frontier of Gamma^-
    u = ray_root(m, [1.0, 0.0])
    assert perron(m, [u, 0.0]).grad[1] < 0
    assert not in_corn(m, [1.0, 0.0])
    for c in ([1, 0], [0, 1], [1, 1]):
        assert in_corn(tandem(), c)


def test_sandwich_on_random_models():
    rng = np.random.default_rng(21)
    for _ in range(8):
        m = random_model(rng, 2, int(rng.integers(2, 4)), burst=True)
        g = fixed_point_iteration(m)
        for c in ([1, 0], [0, 1], [1, 1], [2, 1]):
            rep = decay_report(m, c, g)
            if rep.in_corn:
                assert rep.lower_end <= rep.upper_end + rep.upper.ray_err


def test_coordinate_bound_empty_when_always_draining():
    m = MmfnModel(DRAIN_LAM, DRAIN_MU, np.zeros((2, 2)), Q2)
    lb = lower_decay_rate_coordinate(m, 2)
    assert lb.empty and lb.value == np.inf


def test_coordinate_bound_witness_and_exactness():
    rng = np.random.default_rng(0)
    seen = 0
    for n in range(30):
        m = random_model(rng, 2, 2, burst=bool(n % 2))
        box = auto_box(m)
        ex = two_d_exact(m)
        for k in (1, 2):
            lb = lower_decay_rate_coordinate(m, k, box)
            if lb.empty:
                continue
            w = np.array(lb.witness)
            sp = perron(m, w)
            tol = 1e-7 * m.rate_scale * (1 + np.abs(w).max())
            j = 2 - k
            # closure of G_k at the witness
            assert sp.gamma >= -tol
            assert (w @ m.R)[j] >= -tol
            assert sp.grad[j] <= tol
            assert (m.R_inv @ sp.grad)[k - 1] >= -tol
            # the bound can never undercut the exact rate
            assert lb.value >= ex.alpha[k - 1] - 2 * box.resolution[k - 1]
            if w[j] <= ex.alpha[j]:
                assert abs(lb.value - ex.alpha[k - 1]) <= 2 * box.resolution[k - 1]
                seen += 1
    assert seen >= 5


def test_grid_exports(tmp_path):
    m = feedback()
    g = fixed_point_iteration(m, auto_box(m, steps=40))
    write_grid_csv(g, tmp_path / "grid.csv")
    write_boundary_csv(g, tmp_path / "edge.csv")
    rows = list(csv.reader(open(tmp_path / "grid.csv")))
    assert rows[0] == ["theta_1", "theta_2", "gamma", "in_gamma_minus", "in_dmax"]
    assert len(rows) - 1 == g.Dmax.size
    assert sum(int(r[-1]) for r in rows[1:]) == g.Dmax.sum()
    edge = list(csv.reader(open(tmp_path / "edge.csv")))
    assert len(edge) - 1 == len(boundary_points(g)) > 0


def test_bracket_verdict_rules(grids):
    m, g = grids["tandem"]
    rep = decay_report(m, [1, 0], g)
    est = lambda r, se, ok=True: SimpleNamespace(decay_rate=r, slope_stderr=se, usable=ok)
    mid = 0.5 * (rep.lower_end + rep.upper_end)
    assert bracket_verdict(rep, est(mid, 0.002)) == "holds"
    assert bracket_verdict(rep, est(rep.upper_end + 1.0, 0.01)) == "violated"
    assert bracket_verdict(rep, est(rep.lower_end - 1.0, 0.01)) == "violated"
    assert bracket_verdict(rep, est(mid, 0.5)) == "inconclusive"
    assert bracket_verdict(rep, est(mid, 0.002, ok=False)) == "inconclusive"
    assert bracket_verdict(rep, None) == "inconclusive"
    d = rep.to_dict()
    assert d["decay_rate_lower_end"] == rep.lower_end and d["bracket"] == "not-run"


@settings(max_examples=25)
@given(models())
def test_gamma_minus_K_is_empty_for_stable_models(model):
    rng = np.random.default_rng(0)
    th = rng.uniform(-15.0, 15.0, (4000, model.d)) / model.rate_scale
    g = gamma_batch(model, th)
    both = (g < 0) & ((th @ model.R) < 0).all(axis=1)
    assert not both.any()
