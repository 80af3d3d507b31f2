import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointderev.metrics import circular_error, doa_report, lsd, mel_l2, si_sdr, summarize_by_t60

angles = st.integers(0, 71).map(lambda i: 5.0 * i)


def test_si_sdr_hand_example():
    # projection of [1,1] on [1,0] is [1,0]; residual [0,1]: equal energies
    assert si_sdr([1.0, 1.0], [1.0, 0.0]) == 0.0


def test_si_sdr_perfect_capped(rng):
    x = rng.standard_normal(100)
    assert si_sdr(x, x) == 100.0
    assert si_sdr(np.zeros(100), x) == -100.0


def test_si_sdr_known_value(rng):
    ref = rng.standard_normal(1000)
    noise = rng.standard_normal(1000)
    noise -= noise @ ref / (ref @ ref) * ref  # orthogonal to ref
    noise *= np.linalg.norm(ref) / np.linalg.norm(noise) / 10.0
    assert si_sdr(ref + noise, ref) == pytest.approx(20.0, abs=1e-9)


@given(a=st.floats(1e-3, 1e3), neg=st.booleans(), seed=st.integers(0, 1000))
def test_si_sdr_scale_invariant(a, neg, seed):
    r = np.random.default_rng(seed)
    ref, est = r.standard_normal(200), r.standard_normal(200)
    a = -a if neg else a
    assert abs(si_sdr(a * est, ref) - si_sdr(est, ref)) < 1e-9


def test_si_sdr_errors():
    with pytest.raises(ValueError):
        si_sdr([1.0], [0.0])
    with pytest.raises(ValueError):
        si_sdr([1.0, 2.0], [1.0])


def test_lsd_examples(rng):
    a = rng.standard_normal((10, 80))
    assert lsd(a, a) == 0.0
    assert lsd(a + 0.7, a) == pytest.approx(0.7, rel=1e-12)
    b = rng.standard_normal((10, 80))
    assert lsd(a, b) == lsd(b, a)


def test_mel_l2(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert mel_l2(a, b) == pytest.approx(np.sum((a - b) ** 2))
    with pytest.raises(ValueError):
        mel_l2(a, b[:2])


def test_circular_error_wraparound():
    assert circular_error(0, 355) == 5.0
    assert circular_error(10, 190) == 180.0


@given(a=st.floats(-720, 720), b=st.floats(-720, 720))
def test_circular_error_properties(a, b):
    e = circular_error(a, b)
    assert 0 <= e <= 180
    assert e == circular_error(b, a)


def test_report_all_hits():
    rep = doa_report([[0.0, 5.0], [90.0, 10.0]], [0.0, 90.0])
    assert rep["acc@1"] == 1.0 and rep["mae@1"] == 0.0 and rep["top5_err"] == 0.0


def test_report_rank_four_hit():
    rep = doa_report([[10.0, 20.0, 30.0, 45.0, 50.0]], [45.0])
    assert rep["top1_err"] == 1.0 and rep["top5_err"] == 0.0
    assert rep["mae@1"] == 35.0 and rep["top5_mae"] == 0.0


@given(st.lists(st.tuples(st.lists(angles, min_size=1, max_size=8), angles), min_size=1, max_size=20))
def test_report_against_brute_force(cases):
    preds = [p for p, _ in cases]
    truths = [t for _, t in cases]
    rep = doa_report(preds, truths)
    top1_miss = sum(p[0] != t for p, t in cases) / len(cases)
    top5_miss = sum(t not in p[:5] for p, t in cases) / len(cases)
    assert rep["top1_err"] == pytest.approx(top1_miss)
    assert rep["top5_err"] == pytest.approx(top5_miss)
    assert rep["top5_err"] <= rep["top1_err"]
    assert rep["top5_mae"] <= rep["mae@1"]


def test_report_errors():
    with pytest.raises(ValueError):
        doa_report([], [])
    with pytest.raises(ValueError):
        doa_report([[0.0]], [0.0, 5.0])


def test_summarize_by_t60():
    recs = [{"t60": 0.6, "x": 1.0}, {"t60": 0.3, "x": 2.0}, {"t60": 0.6, "x": 3.0}]
    lines = summarize_by_t60(recs, ["x"]).splitlines()
    assert lines == ["t60,n,x", "0.3,1,2.0000", "0.6,2,2.0000"]
