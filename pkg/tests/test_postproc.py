import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bbsnet import postproc as P
from oracles import otsu_exhaustive


def test_adaptive_constant_map():
    b = P.adaptive_threshold(np.full((5, 5), 0.3))
    assert b.threshold == pytest.approx(0.6)
    assert b.map.sum() == 0


def test_adaptive_half_map():
    s = np.zeros((4, 4))
    s[:, :2] = 0.8
    b = P.adaptive_threshold(s)
    assert b.threshold == pytest.approx(0.8)
    np.testing.assert_array_equal(b.map, s == 0.8)


def test_adaptive_clamped_below_one():
    s = np.full((3, 3), 0.9)
    s[0, 0] = 1.0
    b = P.adaptive_threshold(s)
    assert b.threshold == pytest.approx(1 - 1 / 255)
    assert b.map.sum() == 1
    s = np.full((3, 3), 0.95)
    assert P.adaptive_threshold(s).map.sum() == 0  # max below the clamped threshold


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(0, 1)))
def test_adaptive_matches_closed_form(s):
    b = P.adaptive_threshold(s)
    t = min(2 * s.mean(), 1 - 1 / 255)
    assert b.threshold == t
    np.testing.assert_array_equal(b.map, (s >= t).astype(np.uint8))
    assert set(np.unique(b.map)) <= {0, 1}


def test_otsu_bimodal():
    s = np.array([0.0] * 5 + [1.0] * 5).reshape(2, 5)
    b = P.otsu_threshold(s)
    np.testing.assert_array_equal(b.map, s.astype(np.uint8))
    assert 0 <= b.threshold < 1


def test_otsu_matches_exhaustive_search_100_maps():
    rng = np.random.default_rng(0)
    for n in range(100):
        if n % 2:
            s = rng.random((16, 16))
        else:  # clustered values produce wide plateaus and ties
            s = rng.choice([0.1, 0.2, 0.7, 0.9], size=(16, 16)) + rng.normal(0, 0.01, (16, 16))
            s = np.clip(s, 0, 1)
        assert P.otsu_level(s) == otsu_exhaustive(s)


def test_otsu_tie_goes_to_lowest_threshold():
    # two values 0 and 255: every split between them is equally good
    s = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert P.otsu_level(s) == 0
    assert otsu_exhaustive(s) == 0


def test_otsu_constant_map_warns(caplog):
    with caplog.at_level(logging.WARNING):
        b = P.otsu_threshold(np.full((4, 4), 0.4))
    assert b.threshold == 0 and b.map.all()
    assert "constant" in caplog.text


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)))
def test_otsu_invariant_to_histogram_preserving_rebinning(s):
    # any strictly monotone map of values that keeps the 256-level histogram
    # (here: moving each value within its own quantization bin) keeps the output
    q = P.quantize(s)
    jitter = q / 255 + np.where(q == 0, 0.001, np.where(q == 255, -0.001, 0.0015))
    assert (P.quantize(jitter) == q).all()
    np.testing.assert_array_equal(P.otsu_threshold(s).map, P.otsu_threshold(jitter).map)


def test_binary_idempotence():
    rng = np.random.default_rng(1)
    m = (rng.random((8, 8)) < 0.3).astype(float)
    for method in P.METHODS:
        once = P.binarize(m, method).map
        twice = P.binarize(once.astype(float), method).map
        np.testing.assert_array_equal(once, twice)
        np.testing.assert_array_equal(once, m)


def test_between_class_variance_matches_definition():
    rng = np.random.default_rng(2)
    hist = rng.integers(0, 20, 256)
    var = P.between_class_variance(hist)
    p = hist / hist.sum()
    lv = np.arange(256)
    for t in (3, 100, 200):
        w0, w1 = p[:t + 1].sum(), p[t + 1:].sum()
        mu0 = (p[:t + 1] * lv[:t + 1]).sum() / w0
        mu1 = (p[t + 1:] * lv[t + 1:]).sum() / w1
        assert var[t] == pytest.approx(w0 * w1 * (mu1 - mu0) ** 2, rel=1e-9)


def test_unknown_method():
    with pytest.raises(ValueError):
        P.binarize(np.zeros((2, 2)), "crf")
