"""Label mapping, wake trimming, band-pass filtering and normalisation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import oaconvolve

from .errors import ConfigError, InputError, LabelParseError

log = logging.getLogger(__name__)

STAGES = ("W", "N1", "N2", "N3", "REM")
STAGE_INDEX = {s: i for i, s in enumerate(STAGES)}
DISCARD = "DISCARD"

# R&K token -> AASM stage.  Long forms are the Sleep-EDF annotation strings.
_RK_TO_AASM = {
    "W": "W", "0": "W", "Sleep stage W": "W", "Sleep stage 0": "W",
    "1": "N1", "Sleep stage 1": "N1",
    "2": "N2", "Sleep stage 2": "N2",
    "3": "N3", "Sleep stage 3": "N3",
    "4": "N3", "Sleep stage 4": "N3",
    "R": "REM", "REM": "REM", "Sleep stage R": "REM",
    "M": DISCARD, "Movement time": DISCARD,
    "?": DISCARD, "Sleep stage ?": DISCARD,
}

WAKE_MARGIN_EPOCHS = 60  # 30 min of 30 s epochs


def map_label(raw: str, epoch_index: int | None = None) -> str:
    """Map one R&K hypnogram token to an AASM stage or ``DISCARD``."""
    key = raw.strip()
    try:
        return _RK_TO_AASM[key]
    except KeyError:
        where = f" at epoch {epoch_index}" if epoch_index is not None else ""
        raise LabelParseError(f"unknown sleep-stage label {raw!r}{where}") from None


def map_labels(raw_labels) -> list[str]:
    return [map_label(tok, i) for i, tok in enumerate(raw_labels)]


def trim_wake(labels: list[str], margin: int = WAKE_MARGIN_EPOCHS) -> tuple[int, int] | None:
    """Inclusive index range keeping ``margin`` epochs around the sleep period.

    The sleep period spans the first to last scored sleep stage (N1, N2, N3,
    REM).  Returns None for a recording without any sleep.
    """
    sleep = [i for i, s in enumerate(labels) if s in ("N1", "N2", "N3", "REM")]
    if not sleep:
        return None
    return max(0, sleep[0] - margin), min(len(labels) - 1, sleep[-1] + margin)


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    fs: float
    low: float
    high: float
    window: str = "hamming"

    @property
    def order(self) -> int:
        return len(self.taps)

    def response(self, freqs) -> np.ndarray:
        """Complex frequency response H(f) evaluated directly from the taps."""
        n = np.arange(len(self.taps))
        f = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
        return np.exp(-2j * np.pi * np.outer(f, n) / self.fs) @ self.taps


def design_fir_bandpass(fs: float = 100.0, low: float = 0.2, high: float = 40.0,
                        numtaps: int = 1001) -> FirFilter:
    """Hamming-windowed sinc band-pass, scaled to unit gain at the band centre."""
    if not 0 < low < high < fs / 2:
        raise ConfigError(f"band edges must satisfy 0 < low < high < fs/2, got {low}, {high}, fs={fs}")
    if numtaps < 3 or numtaps % 2 == 0:
        raise ConfigError(f"numtaps must be odd and >= 3, got {numtaps}")
    m = np.arange(numtaps) - (numtaps - 1) / 2
    fl, fh = low / fs, high / fs
    ideal = 2 * fh * np.sinc(2 * fh * m) - 2 * fl * np.sinc(2 * fl * m)
    taps = ideal * np.hamming(numtaps)
    centre = (low + high) / 2
    gain = abs(np.exp(-2j * np.pi * centre / fs * np.arange(numtaps)) @ taps)
    taps = taps / gain
    # Enforce exact symmetry against rounding in the sinc evaluation.
    taps = 0.5 * (taps + taps[::-1])
    return FirFilter(taps, fs, low, high)


def zero_phase_filter(signal, filt: FirFilter) -> np.ndarray:
    """Forward-backward FIR filtering with reflection padding.

    Net magnitude response is |H|^2 and net phase is zero.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = len(filt.taps)
    if x.ndim != 1:
        raise InputError("zero_phase_filter expects a 1-D signal")
    if len(x) <= n:
        raise InputError(f"signal length {len(x)} must exceed filter length {n}")
    pad = min(n, len(x) - 1)
    xp = np.pad(x, pad, mode="reflect")

    def causal(v):
        return oaconvolve(v, filt.taps)[: len(v)]

    y = causal(causal(xp)[::-1])[::-1]
    return y[pad: pad + len(x)]


def normalize(signal) -> np.ndarray:
    """Zero mean, unit population variance.  A constant signal maps to zeros."""
    x = np.asarray(signal, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, abs(mu)):
        log.warning("event=constant_signal msg=\"normalising a constant signal; returning zeros\"")
        return np.zeros_like(x)
    return (x - mu) / sd
