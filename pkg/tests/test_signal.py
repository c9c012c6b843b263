import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal as sps

from sleepcmt.errors import ConfigError, InputError, LabelParseError
from sleepcmt.signal import (
    DISCARD,
    design_fir_bandpass,
    map_label,
    map_labels,
    normalize,
    trim_wake,
    zero_phase_filter,
)

FS = 100.0


@pytest.fixture(scope="module")
def filt():
    return design_fir_bandpass()


def gain(taps, hz):
    _, h = sps.freqz(taps, worN=[hz], fs=FS)
    return abs(h[0])


class TestLabels:
    @pytest.mark.parametrize("raw,stage", [
        ("W", "W"), ("Sleep stage W", "W"), ("1", "N1"), ("2", "N2"), ("3", "N3"), ("4", "N3"),
        ("Sleep stage 4", "N3"), ("R", "REM"), ("Sleep stage R", "REM"),
        ("M", DISCARD), ("Movement time", DISCARD), ("?", DISCARD), ("Sleep stage ?", DISCARD),
    ])
    def test_mapping(self, raw, stage):
        assert map_label(raw) == stage

    def test_unknown_label_names_epoch(self):
        with pytest.raises(LabelParseError, match="epoch 2"):
            map_labels(["W", "1", "Sleep stage 9"])


class TestTrimWake:
    def test_hand_counted_margin(self):
        labels = ["W"] * 200 + ["N2"] * 100 + ["W"] * 200
        assert trim_wake(labels, 60) == (140, 359)

    def test_clamped_at_start(self):
        labels = ["W"] * 10 + ["N1"] * 5 + ["W"] * 100
        assert trim_wake(labels, 60)[0] == 0

    def test_no_surrounding_wake(self):
        labels = ["N2", "N3", "REM"]
        assert trim_wake(labels, 60) == (0, 2)

    def test_all_wake(self):
        assert trim_wake(["W"] * 50, 60) is None

    def test_discards_do_not_count_as_sleep(self):
        labels = [DISCARD] * 5 + ["W"] * 100 + ["N2"] + ["W"] * 100
        assert trim_wake(labels, 60) == (45, 165)


class TestFilterDesign:
    def test_frequency_response(self, filt):
        assert filt.order >= 1001
        assert gain(filt.taps, 0.0) < 0.01
        assert 0.99 <= gain(filt.taps, 10.0) <= 1.01
        assert gain(filt.taps, 48.0) < 0.05

    def test_linear_phase_symmetry(self, filt):
        np.testing.assert_array_equal(filt.taps, filt.taps[::-1])

    def test_response_method_agrees_with_freqz(self, filt):
        freqs = np.array([0.0, 0.2, 5.0, 40.0, 48.0])
        np.testing.assert_allclose(np.abs(filt.response(freqs)), [gain(filt.taps, f) for f in freqs],
                                   atol=1e-12)

    def test_matches_reference_design(self, filt):
        ref = sps.firwin(1001, [0.2, 40.0], pass_zero=False, window="hamming", fs=FS)
        np.testing.assert_allclose(filt.taps, ref, atol=1e-12)

    @pytest.mark.parametrize("kw", [{"low": 0.0}, {"high": 50.0}, {"low": 30, "high": 20}, {"numtaps": 1000}])
    def test_bad_design_rejected(self, kw):
        with pytest.raises(ConfigError):
            design_fir_bandpass(**kw)


class TestZeroPhase:
    def test_sinusoid_has_zero_lag(self, filt):
        t = np.arange(6000) / FS
        x = np.sin(2 * np.pi * 10 * t)
        y = zero_phase_filter(x, filt)
        mid = slice(1500, 4500)
        # the sinusoid repeats every 10 samples; search within half a period
        lags = np.arange(-4, 5)
        xc = [np.dot(x[mid], np.roll(y, -lag)[mid]) for lag in lags]
        assert lags[int(np.argmax(xc))] == 0
        np.testing.assert_allclose(y[mid], x[mid], atol=2e-3)

    def test_broadband_signal_has_zero_lag(self, filt, rng):
        x = zero_phase_filter(rng.standard_normal(8000), filt)  # band-limited noise
        y = zero_phase_filter(x, filt)
        mid = slice(2000, 6000)
        lags = np.arange(-30, 31)
        xc = [np.dot(x[mid], np.roll(y, -lag)[mid]) for lag in lags]
        assert lags[int(np.argmax(xc))] == 0

    def test_dc_rejected_in_interior(self, filt):
        y = zero_phase_filter(np.full(9000, 5.0), filt)
        assert np.max(np.abs(y[3000:6000])) < 5.0 * 1e-4

    def test_zero_in_zero_out(self, filt):
        np.testing.assert_array_equal(zero_phase_filter(np.zeros(3000), filt), 0.0)

    def test_too_short_rejected(self, filt):
        with pytest.raises(InputError):
            zero_phase_filter(np.zeros(500), filt)


class TestNormalize:
    def test_hand_values(self):
        np.testing.assert_allclose(normalize([0.0, 0.0, 2.0, 2.0]), [-1, -1, 1, 1])

    def test_constant_gives_zeros_and_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = normalize(np.full(100, 7.5))
        np.testing.assert_array_equal(out, 0.0)
        assert "constant_signal" in caplog.text

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(10, 200), elements=st.floats(-1e3, 1e3)))
    def test_idempotent(self, x):
        once = normalize(x)
        if np.all(once == 0):
            return
        np.testing.assert_allclose(normalize(once), once, atol=1e-9)
        assert abs(once.mean()) < 1e-9 and abs(once.std() - 1) < 1e-9
