import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from clvd.schedules import (DropoutSchedule, NoiseSchedule, delta_at, schedule_table, sigma_at, table_to_csv,
                            write_schedule_csv)

NOISE = NoiseSchedule(0.3, 25)
DROP = DropoutSchedule(0.25, 25)


@pytest.mark.parametrize("epoch, expected", [(0, 0.0), (25, 0.3), (40, 0.3)])
def test_sigma_exact_points(epoch, expected):
    assert sigma_at(NOISE, epoch) == expected


def test_sigma_ramp_value():
    # 0.3 * 5 / 25
    assert sigma_at(NOISE, 5) == pytest.approx(0.06, abs=1e-15)


@pytest.mark.parametrize("epoch, expected", [(0, 0.0), (25, 0.25), (100, 0.25)])
def test_delta_exact_points(epoch, expected):
    assert delta_at(DROP, epoch) == expected


def test_delta_ramp_value():
    # 0.25 * sqrt(4 / 25) = 0.25 * 0.4
    assert delta_at(DROP, 4) == pytest.approx(0.10, abs=1e-15)


def test_defaults_match_recipe():
    assert NoiseSchedule() == NOISE
    assert DropoutSchedule() == DROP


def test_table_rows():
    rows = schedule_table(NOISE, 2)
    assert [e for e, _ in rows] == [0, 1, 2]
    assert [v for _, v in rows] == pytest.approx([0.0, 0.012, 0.024], abs=1e-15)
    assert schedule_table(DROP, 0) == [(0, 0.0)]
    assert schedule_table(NOISE, 30)[-1] == (30, 0.3)


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "sched.csv"
    write_schedule_csv(DROP, 30, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,value"
    assert len(lines) == 32
    for line in lines[1:]:
        e, v = line.split(",")
        assert float(v) == delta_at(DROP, int(e))
    assert table_to_csv([(0, 0.0)]) == "epoch,value\n0,0.0\n"


@pytest.mark.parametrize("kwargs", [dict(sigma_max=-0.1), dict(e_max=0), dict(e_max=2.5)])
def test_noise_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        NoiseSchedule(**kwargs)


@pytest.mark.parametrize("delta_max", [-0.1, 1.0, 1.5])
def test_dropout_schedule_validation(delta_max):
    with pytest.raises(ValueError):
        DropoutSchedule(delta_max, 25)


maxima = st.floats(min_value=0.0, max_value=5.0, allow_nan=False)
rates = st.floats(min_value=0.0, max_value=0.99)
e_maxes = st.integers(min_value=1, max_value=60)
epochs = st.integers(min_value=0, max_value=200)


@given(maxima, e_maxes, epochs, epochs)
def test_sigma_monotone_and_bounded(s_max, e_max, e1, e2):
    s = NoiseSchedule(s_max, e_max)
    lo, hi = sorted((e1, e2))
    assert 0.0 <= sigma_at(s, lo) <= sigma_at(s, hi) <= s_max
    if hi >= e_max:
        assert sigma_at(s, hi) == s_max


@given(rates, e_maxes, epochs, epochs)
def test_delta_monotone_and_bounded(d_max, e_max, e1, e2):
    s = DropoutSchedule(d_max, e_max)
    lo, hi = sorted((e1, e2))
    assert 0.0 <= delta_at(s, lo) <= delta_at(s, hi) <= d_max
    if hi >= e_max:
        assert delta_at(s, hi) == d_max


@given(e_maxes, st.data())
def test_sqrt_ramp_dominates_linear_ramp(e_max, data):
    epoch = data.draw(st.integers(min_value=0, max_value=e_max))
    lin = sigma_at(NoiseSchedule(1.0, e_max), epoch)
    root = delta_at(DropoutSchedule(0.5, e_max), epoch) / 0.5
    assert root >= lin - 1e-15


@given(st.floats(min_value=0.01, max_value=3.0), e_maxes, epochs)
def test_scale_linearity(c, e_max, epoch):
    base_n, base_d = 0.2, 0.3
    assert sigma_at(NoiseSchedule(c * base_n, e_max), epoch) == pytest.approx(
        c * sigma_at(NoiseSchedule(base_n, e_max), epoch), rel=1e-12, abs=1e-15)
    if c * base_d < 1:
        assert delta_at(DropoutSchedule(c * base_d, e_max), epoch) == pytest.approx(
            c * delta_at(DropoutSchedule(base_d, e_max), epoch), rel=1e-12, abs=1e-15)


def test_negative_epoch_rejected():
    with pytest.raises(ValueError):
        sigma_at(NOISE, -1)


def test_callable_shortcut():
    assert NOISE(10) == sigma_at(NOISE, 10)
    assert DROP(10) == pytest.approx(0.25 * math.sqrt(10 / 25))
