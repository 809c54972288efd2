"""Hypothesis strategies shared by the property tests."""
import numpy as np
from hypothesis import strategies as st

from mmfn.reference import random_model


@st.composite
def models(draw, d=(2, 3), m=(2, 4), stable=True, burst=False):
    seed = draw(st.integers(0, 2**32 - 1))
    dd = draw(st.integers(*d))
    mm = draw(st.integers(*m))
    return random_model(np.random.default_rng(seed), dd, mm, stable=stable, burst=burst)


@st.composite
def generators(draw, m=(2, 6)):
    mm = draw(st.integers(*m))
    rates = draw(st.lists(st.floats(0.01, 50.0), min_size=mm * mm, max_size=mm * mm))
    Q = np.array(rates).reshape(mm, mm)
    np.fill_diagonal(Q, 0.0)
    Q -= np.diag(Q.sum(axis=1))
    return Q


def vectors(d, lo=-1.0, hi=1.0):
    return st.lists(st.floats(lo, hi), min_size=d, max_size=d).map(np.array)
