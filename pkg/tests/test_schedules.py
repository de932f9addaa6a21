import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sapalm.errors import ParameterError
from sapalm.model import LipschitzInfo
from sapalm.schedules import (
    NoiseModel,
    StepsizePolicy,
    minibatch_schedule,
    noise_variance,
    sample_noise,
    stepsize,
    stepsizes,
    weight_c,
    worker_streams,
)


def test_weight_schedules():
    assert weight_c(10, "summable") == 1.0
    assert weight_c(3, "alpha-diminishing", 0.5) == pytest.approx(2.0)
    assert weight_c(8, "smooth-sqrt") == pytest.approx(3.0)
    with pytest.raises(ParameterError):
        weight_c(-1, "summable")
    with pytest.raises(ParameterError):
        weight_c(1, "other")


def test_stepsize_formula():
    lip = LipschitzInfo(block=[2.0, 4.0], L=4.0)
    pol = StepsizePolicy(a=2.0, tau=3, m=2)
    expect = 1.0 / (2.0 * (2.0 + 2 * 4.0 * 3 / math.sqrt(2)))
    assert stepsize(pol, lip, 0, 7) == pytest.approx(expect)
    np.testing.assert_allclose(stepsizes(pol, lip, 7), [stepsize(pol, lip, j, 7) for j in range(2)])


@pytest.mark.parametrize("kw", [dict(a=1.0), dict(regime="x"), dict(regime="alpha-diminishing", alpha=1.0),
                                dict(tau=-1), dict(m=0)])
def test_policy_validation(kw):
    with pytest.raises(ParameterError):
        StepsizePolicy(**kw)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.01, 10), st.integers(0, 20), st.integers(1, 50),
       st.floats(0.01, 100), st.integers(0, 10_000))
def test_stepsize_invariants(a, tau, m, L, k):
    lip = LipschitzInfo(block=[L], L=L)
    g = stepsize(StepsizePolicy(a=a, tau=tau, m=m), lip, 0, k)
    assert g > 0
    # larger delay bound never enlarges the step
    assert stepsize(StepsizePolicy(a=a, tau=tau + 1, m=m), lip, 0, k) <= g
    # steps never grow along iterations
    for regime in ("summable", "alpha-diminishing", "smooth-sqrt"):
        pol = StepsizePolicy(a=a, tau=tau, m=m, regime=regime)
        assert stepsize(pol, lip, 0, k + 1) <= stepsize(pol, lip, 0, k)


def test_noise_variances():
    assert noise_variance(NoiseModel("gaussian-summable", 2.0), 3) == pytest.approx(4.0 * 4 ** -1.5)
    assert noise_variance(NoiseModel("gaussian-diminishing", 2.0, 0.5), 3) == pytest.approx(2.0)
    assert noise_variance(NoiseModel("gaussian-constant", 2.0), 99) == 4.0
    assert noise_variance(NoiseModel("none"), 0) == 0.0


def test_sample_noise_block_variance():
    rng = np.random.default_rng(0)
    model = NoiseModel("gaussian-constant", 3.0)
    draws = np.array([sample_noise(model, 0, 0, 4, rng) for _ in range(20000)])
    assert np.mean(np.sum(draws**2, axis=1)) == pytest.approx(9.0, rel=0.03)
    assert not np.any(sample_noise(NoiseModel("minibatch"), 0, 0, 3, rng))


def test_minibatch_schedule():
    assert minibatch_schedule(0, 0.5, 4) == 4
    assert minibatch_schedule(3, 0.5, 4) == 8
    assert minibatch_schedule(8, 0.5, 1) == 3
    with pytest.raises(ParameterError):
        minibatch_schedule(0, 0.5, 0)


def test_worker_streams_independent_and_reproducible():
    a1, b1 = worker_streams(5, 0)
    a2, b2 = worker_streams(5, 0)
    assert a1.integers(0, 1 << 30) == a2.integers(0, 1 << 30)
    c, _ = worker_streams(5, 1)
    assert not np.array_equal(worker_streams(5, 0)[0].random(8), c.random(8))
    assert not np.array_equal(worker_streams(5, 0)[0].random(8), worker_streams(5, 0)[1].random(8))
