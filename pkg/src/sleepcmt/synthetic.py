"""Synthetic PSG-like data: each stage gets its own EEG and EOG frequency.

Used for sanity runs and tests; nothing here resembles real sleep physiology
beyond the channel layout.
"""

from __future__ import annotations

import numpy as np

from .dataset import EPOCH_SAMPLES, FS, Recording
from .signal import STAGES

# Per-stage centre frequencies (Hz) for the EEG and EOG channels.
EEG_FREQS = (10.0, 6.0, 13.0, 1.5, 4.0)
EOG_FREQS = (2.0, 0.5, 3.5, 5.0, 1.0)

_RK_TOKENS = {"W": ["W", "0"], "N1": ["1"], "N2": ["2"], "N3": ["3", "4"], "REM": ["R"]}


def epoch_signal(label: int, rng: np.random.Generator, noise: float = 0.5, jitter: float = 0.3) -> np.ndarray:
    """One (3000, 2) epoch: jittered class sinusoids plus white noise."""
    t = np.arange(EPOCH_SAMPLES) / FS
    out = np.empty((EPOCH_SAMPLES, 2))
    for ch, freqs in enumerate((EEG_FREQS, EOG_FREQS)):
        f = freqs[label] + rng.uniform(-jitter, jitter)
        amp = rng.uniform(0.8, 1.2)
        out[:, ch] = amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    out += noise * rng.standard_normal(out.shape)
    return out


def synthetic_epochs(labels, rng: np.random.Generator, **kw) -> np.ndarray:
    """(N, 3000, 2) float32 epochs standardised per channel."""
    x = np.stack([epoch_signal(int(y), rng, **kw) for y in labels])
    x = (x - x.mean(axis=(0, 1))) / x.std(axis=(0, 1))
    return x.astype(np.float32)


def balanced_labels(per_class: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(len(STAGES)), per_class))


def markov_hypnogram(n: int, rng: np.random.Generator, stay: float = 0.7) -> np.ndarray:
    """Stage sequence that persists with probability ``stay``, else jumps uniformly."""
    labels = np.empty(n, dtype=np.int64)
    labels[0] = rng.integers(len(STAGES))
    for i in range(1, n):
        labels[i] = labels[i - 1] if rng.random() < stay else rng.integers(len(STAGES))
    return labels


def synthetic_recording(subject_id: str, labels, rng: np.random.Generator, recording_id: str | None = None,
                        discard_rate: float = 0.0, lead_wake: int = 0, tail_wake: int = 0) -> Recording:
    """A raw recording with Sleep-EDF-style channel names and R&K tokens.

    ``lead_wake``/``tail_wake`` pad the night with wake epochs; a fraction
    ``discard_rate`` of epochs is relabelled as movement or unscored.
    """
    labels = [0] * lead_wake + [int(v) for v in labels] + [0] * tail_wake
    epochs = np.stack([epoch_signal(y, rng) for y in labels]) * 40.0  # microvolt-ish scale
    eeg = epochs[:, :, 0].reshape(-1)
    eog = epochs[:, :, 1].reshape(-1)
    tokens = []
    for y in labels:
        if discard_rate and rng.random() < discard_rate:
            tokens.append(str(rng.choice(["M", "?"])))
        else:
            tokens.append(str(rng.choice(_RK_TOKENS[STAGES[y]])))
    n_sec = len(labels) * EPOCH_SAMPLES // int(FS)
    return Recording(
        subject_id,
        recording_id or subject_id,
        {
            "EEG Fpz-Cz": eeg,
            "EOG horizontal": eog,
            "EEG Pz-Oz": rng.standard_normal(eeg.shape) * 20.0,
            "EMG submental": rng.standard_normal(n_sec),
        },
        {"EEG Fpz-Cz": FS, "EOG horizontal": FS, "EEG Pz-Oz": FS, "EMG submental": 1.0},
        tokens,
    )
