import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointderev import doa_classic, roomsim, signals
from jointderev.doa_classic import music_spectrum, srp_phat, steering_delays, top_k_peaks
from jointderev.roomsim import RoomScene
from jointderev.signals import ComplexSpec, MultiWave

GRID = steering_delays()


def scene_spec(angle, speech, t60=0.3, anechoic=True):
    scene = RoomScene(source_angle=angle, t60=t60, anechoic=anechoic)
    mix = roomsim.render_scene([speech[:16000]], scene).mixture
    return signals.multi_stft(mix)


# --------------------------------------------------------------------------- grid


def test_grid_shape_and_sorted():
    assert GRID.angles.shape == (72,) and GRID.delays.shape == (72, 4)
    assert np.all(np.diff(GRID.angles) > 0)
    assert np.all(GRID.delays > 0)


def test_delay_to_nearest_mic():
    assert GRID.delays[0, 0] == pytest.approx(0.5 / 343.0, rel=1e-12)


def test_delays_bounded_by_max_distance():
    assert np.all(GRID.delays <= 2.5 / 343.0 + 1e-15)


def test_rotational_symmetry():
    # mics rotated by -90 degrees: candidate theta sees what theta + 90 saw before
    mics = roomsim.array_positions(angles=(270.0, 0.0, 90.0, 180.0))
    rotated = steering_delays(mics)
    np.testing.assert_allclose(rotated.delays, np.roll(GRID.delays, -18, axis=0), atol=1e-15)


def test_delays_match_explicit_distances():
    mics = roomsim.array_positions()
    for g in (0, 13, 50):
        a = np.deg2rad(GRID.angles[g])
        p = np.array([2 + 1.5 * np.cos(a), 2 + 1.5 * np.sin(a), 1.25])
        np.testing.assert_allclose(GRID.delays[g], np.linalg.norm(mics - p, axis=1) / 343.0)


# --------------------------------------------------------------------------- SRP-PHAT


def test_srp_phat_anechoic_45(speech):
    power = srp_phat(scene_spec(45.0, speech), GRID)
    assert abs(GRID.angles[np.argmax(power)] - 45.0) <= 5.0


def test_srp_phat_flat_for_identical_channels(rng):
    x = rng.standard_normal(8000)
    spec = signals.multi_stft(MultiWave(np.tile(x, (4, 1))))
    power = srp_phat(spec, GRID)
    # with no inter-mic delay information the response depends only on geometry;
    # the symmetric array makes it periodic with the array's 90 degree symmetry
    np.testing.assert_allclose(power, np.roll(power, 18), rtol=1e-9, atol=1e-9 * np.abs(power).max())
    # unit PHAT cross-spectra: the response is sum over pairs and bins of cos(2 pi f tdoa)
    f = spec.bin_freqs()
    f = f[(f >= 300) & (f <= 3500)]
    oracle = np.zeros(72)
    for i in range(4):
        for j in range(i + 1, 4):
            tdoa = GRID.delays[:, i] - GRID.delays[:, j]
            oracle += spec.n_frames * np.cos(2 * np.pi * np.outer(tdoa, f)).sum(axis=1)
    np.testing.assert_allclose(power, oracle, rtol=1e-9, atol=1e-9 * np.abs(oracle).max())


@given(scales=st.lists(st.floats(0.01, 100), min_size=4, max_size=4), seed=st.integers(0, 1000))
def test_srp_phat_channel_scale_invariance(scales, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((4, 6, 1025)) + 1j * r.standard_normal((4, 6, 1025))
    base = srp_phat(ComplexSpec(X), GRID)
    scaled = srp_phat(ComplexSpec(X * np.asarray(scales)[:, None, None]), GRID)
    np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-9 * np.abs(base).max())


def test_srp_phat_needs_two_channels(rng):
    with pytest.raises(ValueError):
        srp_phat(ComplexSpec(rng.standard_normal((1, 4, 1025)) + 0j), GRID)


# --------------------------------------------------------------------------- MUSIC


def test_music_anechoic_120(speech):
    p = music_spectrum(scene_spec(120.0, speech), GRID)
    assert GRID.angles[np.argmax(p)] == 120.0


def test_music_white_noise_near_flat(rng):
    X = rng.standard_normal((4, 400, 1025)) + 1j * rng.standard_normal((4, 400, 1025))
    p = music_spectrum(ComplexSpec(X), GRID)
    assert p.max() / p.min() < 3


@given(scale=st.floats(1e-4, 1e4), seed=st.integers(0, 1000))
def test_music_global_scale_invariance(scale, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((4, 20, 1025)) + 1j * r.standard_normal((4, 20, 1025))
    np.testing.assert_allclose(music_spectrum(ComplexSpec(scale * X), GRID), music_spectrum(ComplexSpec(X), GRID), rtol=1e-9)


def test_music_single_steering_vector_capped():
    # every frame is exactly the steering vector of candidate 30: rank-one covariance
    spec = ComplexSpec(np.zeros((4, 3, 1025), dtype=complex))
    f = spec.bin_freqs()
    a = np.exp(-2j * np.pi * f[None, :] * GRID.delays[30][:, None]) / GRID.distances[30][:, None]
    spec.data[:] = a[:, None, :]
    p = music_spectrum(spec, GRID)
    assert np.argmax(p) == 30
    assert p[30] == pytest.approx(1.0)  # every per-bin spectrum peaks here
    assert np.all(np.isfinite(p))


def test_music_needs_more_channels_than_sources(rng):
    with pytest.raises(ValueError):
        music_spectrum(ComplexSpec(rng.standard_normal((2, 4, 1025)) + 0j), GRID, n_sources=2)


# --------------------------------------------------------------------------- top-k


def test_top_k_single_peak():
    s = np.zeros(72)
    s[10] = 1.0
    assert top_k_peaks(s)[0] == (50.0, 1.0)


def test_top_k_constant_spectrum():
    assert [a for a, _ in top_k_peaks(np.ones(72))] == [0.0, 5.0, 10.0, 15.0, 20.0]


def test_top_k_equal_peaks_lower_first():
    s = np.zeros(72)
    s[40] = s[12] = 2.0
    assert [a for a, _ in top_k_peaks(s, 2)] == [60.0, 200.0]


def test_top_k_wraps_around():
    s = np.linspace(0, 1, 72)  # maximum at the last index, neighbour index 0 is lower
    assert top_k_peaks(s, 1)[0][0] == 355.0


def test_top_k_k_too_large():
    with pytest.raises(ValueError):
        top_k_peaks(np.zeros(72), 73)


def brute_peaks(s, k):
    n = len(s)
    peaks = [i for i in range(n) if s[i] > s[i - 1] and s[i] >= s[(i + 1) % n]]
    peaks.sort(key=lambda i: (-s[i], i))
    rest = sorted((i for i in range(n) if i not in peaks), key=lambda i: (-s[i], i))
    return (peaks + rest)[:k]


@given(st.lists(st.integers(0, 6), min_size=72, max_size=72), st.integers(1, 8))
def test_top_k_matches_brute_force(values, k):
    s = np.asarray(values, dtype=float)
    assert [int(a / 5) for a, _ in top_k_peaks(s, k)] == brute_peaks(s, k)


def test_estimate_doa_dispatch(speech):
    spec = scene_spec(200.0, speech)
    for method in ("srp-phat", "music"):
        top, power = doa_classic.estimate_doa(spec, method)
        assert len(top) == 5 and power.shape == (72,)
        assert top[0][0] == 200.0
    with pytest.raises(ValueError):
        doa_classic.estimate_doa(spec, "esprit")


@pytest.mark.slow
def test_reverberant_top5_contains_truth_mostly(speech):
    hits = 0
    angles = [0.0, 50.0, 95.0, 170.0, 230.0, 300.0]
    for a in angles:
        top, _ = doa_classic.estimate_doa(scene_spec(a, speech, t60=0.9, anechoic=False), "srp-phat")
        hits += any(t == a for t, _ in top)
    assert hits > len(angles) / 2
