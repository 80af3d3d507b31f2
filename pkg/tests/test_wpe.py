import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointderev import roomsim, signals, wpe
from jointderev.metrics import si_sdr
from jointderev.signals import ComplexSpec
from jointderev.wpe import WpeConfig, delayed_stack, wpe_dereverb


def ar_reverb(C=4, T=300, K=1025, taps=4, delay=3, active=0.3, gain=0.15, seed=0):
    """Sparse complex driving process passed through a known delayed multichannel AR filter.

    Returns ``(observed, driving)`` as ``[C, T, K]`` arrays.
    """
    r = np.random.default_rng(seed)
    on = r.random((T, K)) < active
    s = (r.standard_normal((C, T, K)) + 1j * r.standard_normal((C, T, K))) * on[None]
    G = gain * (r.standard_normal((K, C * taps, C)) + 1j * r.standard_normal((K, C * taps, C))) / np.sqrt(C * taps)
    y = np.zeros_like(s)
    for t in range(T):
        past = [y[:, t - delay - k, :] if t - delay - k >= 0 else np.zeros((C, K)) for k in range(taps)]
        ytil = np.concatenate(past, axis=0)  # [C*taps, K], tap-major like delayed_stack
        y[:, t, :] = s[:, t, :] + np.einsum("pk,kpc->ck", ytil, np.conj(G))
    return y, s


def test_delayed_stack_layout():
    Y = np.arange(2 * 2 * 8, dtype=float).reshape(2, 2, 8) + 1
    out = delayed_stack(Y, taps=2, delay=3)
    assert out.shape == (2, 4, 8)
    np.testing.assert_array_equal(out[:, 0:2, 3:], Y[:, :, :5])
    np.testing.assert_array_equal(out[:, 2:4, 4:], Y[:, :, :4])
    assert not np.any(out[:, 0:2, :3])


def test_exact_ar_reverberation_removed():
    y, s = ar_reverb()
    out = wpe_dereverb(ComplexSpec(y), WpeConfig(taps=4, delay=3, iterations=3)).data
    late_in = np.sum(np.abs(y - s) ** 2)
    late_out = np.sum(np.abs(out - s) ** 2)
    assert late_out < 1e-6 * late_in


def test_zero_input_zero_output():
    out = wpe_dereverb(ComplexSpec(np.zeros((4, 30, 1025), dtype=complex)))
    assert not np.any(out.data)


def test_shape_preserved(rng):
    X = rng.standard_normal((3, 40, 1025)) + 1j * rng.standard_normal((3, 40, 1025))
    assert wpe_dereverb(ComplexSpec(X)).data.shape == X.shape


def test_too_short():
    with pytest.raises(ValueError):
        wpe_dereverb(ComplexSpec(np.ones((2, 13, 1025), dtype=complex)))


def test_config_validation():
    with pytest.raises(ValueError):
        WpeConfig(taps=0)
    with pytest.raises(ValueError):
        WpeConfig(delay=0)


def test_objective_monotone(speech):
    scene = roomsim.RoomScene(source_angle=40.0, t60=0.6)
    spec = signals.multi_stft(roomsim.render_scene([speech], scene).mixture)
    hist = []
    wpe_dereverb(spec, WpeConfig(iterations=3), history=hist)
    assert len(hist) == 1 + 2 * 3
    for a, b in zip(hist, hist[1:]):
        assert np.all(b <= a + 1e-9 * np.abs(a))


@settings(max_examples=10)
@given(re=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), im=st.floats(-10, 10), seed=st.integers(0, 100))
def test_scale_equivariance(re, im, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((2, 30, 1025)) + 1j * r.standard_normal((2, 30, 1025))
    c = complex(re, im)
    cfg = WpeConfig(taps=3, delay=2, iterations=2)
    a = wpe_dereverb(ComplexSpec(c * X), cfg).data
    b = c * wpe_dereverb(ComplexSpec(X), cfg).data
    assert np.linalg.norm(a - b) <= 1e-9 * np.linalg.norm(b)


def test_per_channel_mode_matches_single_channel_runs(rng):
    X = rng.standard_normal((4, 40, 1025)) + 1j * rng.standard_normal((4, 40, 1025))
    cfg = WpeConfig(taps=3, delay=2, iterations=2, multichannel=False)
    joint = wpe_dereverb(ComplexSpec(X), cfg).data
    for c in range(4):
        single = wpe_dereverb(ComplexSpec(X[c : c + 1]), WpeConfig(taps=3, delay=2, iterations=2)).data[0]
        np.testing.assert_array_equal(joint[c], single)


def test_singular_system_retries_with_more_loading(caplog):
    # identical channels make the stacked covariance exactly singular
    r = np.random.default_rng(0)
    x = r.standard_normal((1, 40, 1025)) + 1j * r.standard_normal((1, 40, 1025))
    out = wpe_dereverb(ComplexSpec(np.repeat(x, 3, axis=0)), WpeConfig(diagonal_loading=0.0, taps=2, delay=1))
    assert np.all(np.isfinite(out.data))
    assert "raising loading" in caplog.text


def test_unsolvable_system_raises():
    R = np.full((1, 2, 2), np.nan + 0j)
    with pytest.raises(np.linalg.LinAlgError):
        wpe._solve_filters(R, np.ones((1, 2, 1), dtype=complex), 1e-10)


@pytest.mark.slow
def test_reverberant_utterance_improves(speech):
    scene = roomsim.RoomScene(source_angle=140.0, t60=0.6)
    r = roomsim.render_scene([speech], scene)
    spec = signals.multi_stft(r.mixture)
    out = signals.multi_istft(wpe_dereverb(spec)).samples[0]
    n = len(out)
    sl = slice(1200, n - 1200)
    ref = r.early[0].samples[0][:n]
    assert si_sdr(out[sl], ref[sl]) > si_sdr(r.mixture.samples[0][:n][sl], ref[sl])
