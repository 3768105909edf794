import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsl.errors import InputError
from fedsl.wireless import (
    LinkParams,
    latency,
    link_rate,
    noise_power_dbm,
    path_loss_db,
    round_latency,
)
from oracles import link_rate_mw


@pytest.mark.parametrize(
    "d_km, expected",
    [(1.0, 128.1), (0.1, 90.5), (0.3, 108.4397591774593)],
)
def test_path_loss(d_km, expected):
    assert path_loss_db(d_km) == pytest.approx(expected, abs=1e-9)


def test_noise_power_default():
    assert noise_power_dbm(LinkParams(0.1, 23.0)) == pytest.approx(-107.0102999566398, abs=1e-12)


def test_unit_snr_gives_bandwidth():
    d = 0.2
    params = LinkParams(d, 0.0)
    tx = path_loss_db(d) + noise_power_dbm(params)
    assert link_rate(LinkParams(d, tx)) == pytest.approx(5e6, rel=1e-12)


@pytest.mark.parametrize(
    "d_km, tx, frozen",
    [(0.1, 23.0, 65625995.134477556), (0.3, 23.0, 35877963.2632917), (0.1, 37.0, 88878716.54091695)],
)
def test_rate_matches_linear_oracle(d_km, tx, frozen):
    rate = link_rate(LinkParams(d_km, tx))
    assert rate == pytest.approx(link_rate_mw(d_km, tx, 5e6, -174.0), rel=1e-10)
    assert rate == pytest.approx(frozen, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(d1=st.floats(0.01, 2.0), d2=st.floats(0.01, 2.0), tx=st.floats(0.0, 46.0))
def test_rate_decreases_with_distance(d1, d2, tx):
    r1, r2 = link_rate(LinkParams(d1, tx)), link_rate(LinkParams(d2, tx))
    if d1 < d2:
        assert r1 >= r2
    assert r1 > 0 and r2 > 0


@settings(max_examples=100, deadline=None)
@given(d=st.floats(0.01, 2.0), p1=st.floats(0.0, 46.0), p2=st.floats(0.0, 46.0))
def test_rate_increases_with_power(d, p1, p2):
    if p1 < p2:
        assert link_rate(LinkParams(d, p1)) <= link_rate(LinkParams(d, p2))


@settings(max_examples=100, deadline=None)
@given(a=st.integers(0, 10**8), b=st.integers(0, 10**8), r=st.floats(1e3, 1e9))
def test_latency_additive(a, b, r):
    assert latency(a + b, r) == pytest.approx(latency(a, r) + latency(b, r), rel=1e-12, abs=1e-300)


def test_latency_example():
    assert latency(1_000_000, 8e6) == 1.0


def test_round_latency_modes():
    assert round_latency([1.0, 3.0], [2.0, 0.5]) == 5.0
    assert round_latency([1.0, 3.0], [2.0, 0.5], mode="sum") == 6.5
    with pytest.raises(InputError):
        round_latency([1.0], [1.0], mode="avg")


@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan])
def test_invalid_distance(bad):
    with pytest.raises(InputError):
        LinkParams(bad, 23.0)
    with pytest.raises(InputError):
        path_loss_db(bad)


def test_invalid_latency_inputs():
    with pytest.raises(InputError):
        latency(10, 0.0)
    with pytest.raises(InputError):
        latency(-1, 1.0)


def test_zero_bytes_zero_seconds():
    assert latency(0, 1e6) == 0.0


def test_doubling_bytes_doubles_latency():
    assert latency(2 * 1234, 3e6) == 2 * latency(1234, 3e6)
