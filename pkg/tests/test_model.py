import numpy as np
import pytest
from hypothesis import given

from mmfn.errors import ModelStructureError
from mmfn.model import MmfnModel, augmented_routing, derive, spectral_radius, validate_model
from mmfn.reference import REFERENCE_MODELS, tandem

from strategies import models

Q2 = [[-1.0, 1.0], [1.0, -1.0]]


def _model(**kw):
    base = dict(lam=[[1.0, 0.5], [0.2, 0.3]], mu=[[2.0, 2.0], [2.0, 2.0]],
                P=[[0.0, 0.5], [0.0, 0.0]], Q=Q2)
    base.update(kw)
    return MmfnModel(**base)


@pytest.mark.parametrize("name", sorted(REFERENCE_MODELS))
def test_reference_models_valid(name):
    assert validate_model(REFERENCE_MODELS[name]()).ok


def test_shape_errors_raise():
    with pytest.raises(ModelStructureError):
        _model(mu=[[1.0, 1.0]])
    with pytest.raises(ModelStructureError):
        _model(P=[[0.0]])
    with pytest.raises(ModelStructureError):
        _model(Q=[[-1.0]])
    with pytest.raises(ModelStructureError):
        _model(lam=[[np.nan, 1.0], [1.0, 1.0]])


def test_arrays_are_frozen():
    m = tandem()
    with pytest.raises(ValueError):
        m.lam[0, 0] = 5.0
    with pytest.raises(ValueError):
        m.R[0, 0] = 5.0


def test_negative_rate_reported():
    rep = validate_model(_model(lam=[[1.0, -0.5], [0.2, 0.3]]))
    assert not rep.ok
    assert rep["nonnegative_rates"].witness == [[1, 2]]


def test_routing_checks():
    rep = validate_model(_model(P=[[0.0, 1.2], [0.0, 0.0]]))
    assert not rep["routing_entries"].passed
    assert not rep["routing_substochastic"].passed
    rep = validate_model(_model(P=[[0.0, 1.0], [1.0, 0.0]]))
    assert not rep["routing_transient"].passed


def test_reducible_background_names_absorbing_state():
    rep = validate_model(_model(Q=[[-1.0, 1.0], [0.0, 0.0]]))
    c = rep["background_irreducible"]
    assert not c.passed
    assert "state 2 absorbing" in c.detail


def test_bad_generator():
    rep = validate_model(_model(Q=[[-1.0, 2.0], [1.0, -1.0]]))
    assert not rep["generator"].passed


def test_network_irreducibility():
    # station 2 gets no input from anywhere
    rep = validate_model(_model(lam=[[1.0, 0.5], [0.0, 0.0]], P=[[0.0, 0.0], [0.0, 0.0]]))
    assert not rep["network_irreducible"].passed
    assert validate_model(tandem())["network_irreducible"].passed


def test_single_station_rejected():
    m = MmfnModel([[1.0, 1.0]], [[2.0, 2.0]], [[0.0]], Q2)
    assert not validate_model(m)["station_count"].passed


def test_derived_quantities_tandem():
    m = tandem()
    np.testing.assert_allclose(m.R, [[1.0, 0.0], [-1.0, 1.0]])
    # v = lam + P^T mu - mu
    np.testing.assert_allclose(m.v, [[0.5, -1.3], [0.4, -1.1]])
    np.testing.assert_allclose(m.R @ m.R_inv, np.eye(2), atol=1e-15)
    assert derive(m).inverse_residual <= 1e-12


def test_augmented_routing_rows():
    Pb = augmented_routing(tandem())
    np.testing.assert_allclose(Pb.sum(axis=1), 1.0)
    assert Pb[0, 1] == 1.0 and Pb[2, 0] == 1.0


def test_spectral_radius():
    assert spectral_radius(np.array([[0.0, 0.5], [0.5, 0.0]])) == pytest.approx(0.5)
    assert spectral_radius(np.zeros((0, 0))) == 0.0


@given(models(d=(2, 4), m=(2, 4)))
def test_random_models_valid_and_R_inverse_nonnegative(m):
    assert validate_model(m).ok
    assert (m.R_inv >= -1e-15).all()
    np.testing.assert_allclose(np.diag(m.R_inv) >= 1.0, True)


@given(models())
def test_net_flow_identity(m):
    expect = m.lam + np.einsum("li,lk->ki", m.mu, m.P) - m.mu
    np.testing.assert_allclose(m.v, expect, atol=1e-14)
    np.testing.assert_allclose(m.v, m.lam - m.R @ m.mu, atol=1e-13)


def test_to_dict_roundtrip():
    m = tandem()
    d = m.to_dict()
    m2 = MmfnModel(d["lambda"], d["mu"], d["P"], d["Q"])
    for name in ("lam", "mu", "P", "Q"):
        np.testing.assert_array_equal(getattr(m2, name), getattr(m, name))
