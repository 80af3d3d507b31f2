"""Synthetic speech-like utterances for corpus-free runs and tests.

Syllables alternate voiced segments (a gliding harmonic series shaped by
two formant resonances) and unvoiced noise bursts, separated by short
pauses. The result is non-stationary, band-limited and deterministic per seed.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .signals import SAMPLE_RATE

_VOWEL_FORMANTS = ((730, 1090), (270, 2290), (530, 1840), (570, 840), (300, 870), (660, 1720), (440, 1020))


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    return lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], x)


def synth_utterance(duration: float = 1.0, fs: int = SAMPLE_RATE, seed: int = 0, peak: float = 0.5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    out = np.zeros(n)
    pos = int(rng.integers(0, int(0.05 * fs) + 1))
    while pos < n:
        seg_len = int(rng.uniform(0.08, 0.25) * fs)
        seg_len = min(seg_len, n - pos)
        if seg_len < 32:
            break
        t = np.arange(seg_len) / fs
        if rng.random() < 0.75:
            f0 = rng.uniform(100, 220) * (1 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-9))
            phase = 2 * np.pi * np.cumsum(f0) / fs
            n_harm = int(4000 // f0.max())
            seg = sum(np.sin(k * phase) / k for k in range(1, n_harm + 1))
            f1, f2 = _VOWEL_FORMANTS[rng.integers(len(_VOWEL_FORMANTS))]
            seg = _resonator(seg, f1, 90, fs) + 0.6 * _resonator(seg, f2, 120, fs)
        else:
            seg = rng.standard_normal(seg_len)
            seg = _resonator(seg, rng.uniform(2500, 5500), 1500, fs)
        env = np.sin(np.pi * np.arange(seg_len) / seg_len) ** 0.5
        seg = seg * env * rng.uniform(0.3, 1.0) / (np.abs(seg).max() + 1e-12)
        out[pos : pos + seg_len] += seg
        pos += seg_len + int(rng.uniform(0.03, 0.15) * fs)
    m = np.abs(out).max()
    return out * (peak / m) if m > 0 else out
