"""SRP-PHAT and broadband MUSIC on a 72-point azimuth grid with near-field steering."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .roomsim import ARRAY_CENTER, SOUND_SPEED, SOURCE_RADIUS, array_positions, circle_point
from .signals import ComplexSpec

GRID_STEP = 5.0
N_CLASSES = 72
DEFAULT_BAND = (300.0, 3500.0)
MUSIC_CAP = 1e12


@dataclass
class SteeringGrid:
    angles: np.ndarray  # [G] degrees
    points: np.ndarray  # [G, 3]
    distances: np.ndarray  # [G, C] metres
    delays: np.ndarray  # [G, C] seconds
    mic_positions: np.ndarray


def steering_delays(
    mic_positions=None,
    center=ARRAY_CENTER,
    radius: float = SOURCE_RADIUS,
    c: float = SOUND_SPEED,
    step: float = GRID_STEP,
) -> SteeringGrid:
    """Exact propagation delays from each candidate point on the source circle to each mic."""
    mics = array_positions() if mic_positions is None else np.asarray(mic_positions, dtype=np.float64)
    angles = np.arange(0.0, 360.0, step)
    points = np.stack([circle_point(a, radius, center) for a in angles])
    dist = np.linalg.norm(points[:, None, :] - mics[None], axis=-1)
    return SteeringGrid(angles, points, dist, dist / c, mics)


def _band_bins(spec: ComplexSpec, band):
    f = spec.bin_freqs()
    sel = np.nonzero((f >= band[0]) & (f <= band[1]))[0]
    if len(sel) == 0:
        raise ValueError(f"no STFT bins inside band {band}")
    return sel, f[sel]


def srp_phat(spec: ComplexSpec, grid: SteeringGrid, band=DEFAULT_BAND) -> np.ndarray:
    """Steered response power with phase transform, summed over pairs, frames and bins."""
    X = spec.data
    C = X.shape[0]
    if C < 2:
        raise ValueError("SRP-PHAT needs at least two channels")
    sel, freqs = _band_bins(spec, band)
    X = X[:, :, sel]
    mag = np.abs(X)
    U = np.where(mag > 0, X / np.where(mag > 0, mag, 1.0), 0.0)
    pairs = list(combinations(range(C), 2))
    # frame-summed PHAT cross-spectra per pair: [P, K]
    cross = np.stack([np.sum(U[i] * np.conj(U[j]), axis=0) for i, j in pairs])
    tdoa = np.stack([grid.delays[:, i] - grid.delays[:, j] for i, j in pairs], axis=1)  # [G, P]
    steer = np.exp(2j * np.pi * tdoa[:, :, None] * freqs[None, None, :])
    return np.real(np.einsum("pk,gpk->g", cross, steer))


def music_spectrum(spec: ComplexSpec, grid: SteeringGrid, n_sources: int = 1, band=DEFAULT_BAND) -> np.ndarray:
    """Broadband MUSIC: mean of per-bin pseudo-spectra, each scaled to a unit maximum."""
    X = spec.data
    C = X.shape[0]
    if C <= n_sources:
        raise ValueError(f"MUSIC needs more channels ({C}) than sources ({n_sources})")
    sel, freqs = _band_bins(spec, band)
    Xb = np.transpose(X[:, :, sel], (2, 0, 1))  # [K, C, T]
    R = Xb @ np.conj(np.transpose(Xb, (0, 2, 1))) / Xb.shape[-1]
    tr = np.real(np.trace(R, axis1=1, axis2=2))
    tr = np.where(tr > 0, tr, 1.0)
    R = R / tr[:, None, None] + (1e-9 / C) * np.eye(C)
    _, vecs = np.linalg.eigh(R)
    noise = vecs[:, :, : C - n_sources]  # ascending eigenvalues
    steer = np.exp(-2j * np.pi * freqs[:, None, None] * grid.delays[None]) / grid.distances[None]  # [K, G, C]
    proj = np.einsum("kcn,kgc->kgn", np.conj(noise), steer)
    denom = np.sum(np.abs(proj) ** 2, axis=-1)
    pseudo = np.minimum(1.0 / np.maximum(denom, 1.0 / MUSIC_CAP), MUSIC_CAP)
    pseudo /= pseudo.max(axis=1, keepdims=True)
    return pseudo.mean(axis=0)


def top_k_peaks(spectrum, k: int = 5, step: float = GRID_STEP) -> list[tuple[float, float]]:
    """Best ``k`` local maxima of a circular spectrum, padded with the best remaining points.

    Ties go to the lower angle.
    """
    s = np.asarray(spectrum, dtype=np.float64)
    if k > len(s):
        raise ValueError(f"k={k} exceeds grid size {len(s)}")
    left, right = np.roll(s, 1), np.roll(s, -1)
    is_peak = (s > left) & (s >= right)
    order = np.argsort(-s, kind="stable")
    chosen = [i for i in order if is_peak[i]][:k]
    if len(chosen) < k:
        taken = set(chosen)
        chosen += [i for i in order if i not in taken][: k - len(chosen)]
    return [(float(i * step), float(s[i])) for i in chosen]


def estimate_doa(spec: ComplexSpec, method: str, grid: SteeringGrid | None = None, k: int = 5, band=DEFAULT_BAND):
    grid = steering_delays() if grid is None else grid
    if method == "srp-phat":
        power = srp_phat(spec, grid, band)
    elif method == "music":
        power = music_spectrum(spec, grid, 1, band)
    else:
        raise ValueError(f"unknown DOA method {method!r}")
    return top_k_peaks(power, k), power

