import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgpcnn.corpus import Waveform
from cgpcnn.features import (LOG_FLOOR, FrameConfig, apply_cmn, build_mel_filterbank, extract_mfbf,
                             feature_path, frame_signal, hz_to_mel, mel_bank, mel_to_hz,
                             power_spectrum, read_features, utterance_features, write_features)


def dft_power(frame, n):
    """Direct O(N^2) DFT of the zero-padded frame."""
    x = np.zeros(n)
    x[:len(frame)] = frame
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    re = (x * np.cos(2 * np.pi * k * t / n)).sum(axis=1)
    im = -(x * np.sin(2 * np.pi * k * t / n)).sum(axis=1)
    return re ** 2 + im ** 2


# -- framing ---------------------------------------------------------------

def test_three_seconds_is_300_frames():
    frames = frame_signal(Waveform(np.zeros(48000), 16000))
    assert frames.shape == (300, 400)


def test_constant_signal_frames_equal_window():
    frames = frame_signal(Waveform(np.ones(16000), 16000))
    n = 400
    win = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / (n - 1))
    for t in range(0, 97):      # frames lying fully inside the signal
        np.testing.assert_allclose(frames[t], win, atol=1e-15)


def test_frame_positions_and_tail_padding():
    x = np.arange(1000, dtype=float) + 1
    frames = frame_signal(Waveform(x, 16000), FrameConfig())
    win = np.hamming(400)
    assert frames.shape[0] == 1000 // 160
    np.testing.assert_allclose(frames[2], x[320:720] * win)
    last = frames[-1]               # starts at 800, only 200 real samples
    np.testing.assert_allclose(last[:200], x[800:] * win[:200])
    assert not last[200:].any()


def test_frame_config_invariants():
    with pytest.raises(ValueError):
        FrameConfig(frame_ms=10, hop_ms=10)
    with pytest.raises(ValueError):
        FrameConfig(fft_size=500)
    with pytest.raises(ValueError):
        frame_signal(Waveform(np.ones(100), 16000))
    with pytest.raises(ValueError, match="exceeds"):
        frame_signal(Waveform(np.ones(16000), 16000), FrameConfig(frame_ms=40, fft_size=512))


# -- power spectrum ---------------------------------------------------------

def test_power_spectrum_matches_direct_dft():
    rng = np.random.default_rng(0)
    for _ in range(5):
        frame = rng.standard_normal(400) * np.hamming(400)
        np.testing.assert_allclose(power_spectrum(frame, 512), dft_power(frame, 512), rtol=0, atol=1e-9)


def test_power_spectrum_zero_and_dc():
    assert not power_spectrum(np.zeros(400), 512).any()
    c = 0.3
    win = np.hamming(400)
    p = power_spectrum(c * win, 512)
    assert p[0] == pytest.approx((c * win.sum()) ** 2, rel=1e-12)


def test_bin_sine_concentrates_at_bin():
    k0 = 40
    t = np.arange(512)
    p = power_spectrum(np.sin(2 * np.pi * k0 * t / 512) * np.hamming(512), 512)
    assert np.argmax(p) == k0
    assert p[k0 + 3] / p[k0] < 1e-3
    np.testing.assert_allclose(p, dft_power(np.sin(2 * np.pi * k0 * t / 512) * np.hamming(512), 512),
                               atol=1e-9)


# -- mel filter bank --------------------------------------------------------

def test_mel_formula_values():
    assert hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2), abs=1e-12)
    assert hz_to_mel(700.0) == pytest.approx(781.1728, abs=1e-4)
    f = np.linspace(0, 8000, 17)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


@pytest.mark.parametrize("M", [13, 26, 40])
def test_filterbank_structure(M):
    bank = build_mel_filterbank(M, 16000, 512)
    b = bank.boundaries
    assert b.size == M + 2 and np.all(np.diff(b) > 0)
    mel = hz_to_mel(b)
    np.testing.assert_allclose(np.diff(mel), np.diff(mel)[0], rtol=1e-9)
    assert b[0] == 0.0 and b[-1] == 8000.0
    w = bank.weights
    assert w.shape == (M, 257)
    assert w.min() >= 0.0 and w.max() <= 1.0
    freqs = bank.bin_freqs
    for m in range(M):
        outside = (freqs <= b[m]) | (freqs >= b[m + 2])
        assert not w[m, outside].any()
        # unimodal: nondecreasing up to the peak, nonincreasing after it
        peak = int(np.argmax(w[m]))
        assert np.all(np.diff(w[m, :peak + 1]) >= 0) and np.all(np.diff(w[m, peak:]) <= 0)
        # the peak sits on one of the two bins bracketing the center frequency
        lo_bin = int(np.floor(b[m + 1] * 512 / 16000))
        assert peak in (lo_bin, lo_bin + 1)
    np.testing.assert_allclose(np.diag(bank.response(bank.centers)), 1.0)
    np.testing.assert_allclose(bank.response(b[:-2]).diagonal(), 0.0)


def test_filterbank_matches_triangle_oracle():
    bank = build_mel_filterbank(26)
    b = bank.boundaries
    for m in (0, 7, 25):
        for k in range(257):
            f = k * 16000 / 512
            if b[m] <= f <= b[m + 1]:
                expected = (f - b[m]) / (b[m + 1] - b[m])
            elif b[m + 1] <= f <= b[m + 2]:
                expected = (b[m + 2] - f) / (b[m + 2] - b[m + 1])
            else:
                expected = 0.0
            assert bank.weights[m, k] == pytest.approx(expected, abs=1e-12)


def test_bandwidth_shrinks_with_m():
    widths = [np.mean(np.diff(mel_bank(M).boundaries)) for M in (13, 26, 40)]
    assert widths[0] > widths[1] > widths[2]
    for m_lo, m_hi in ((13, 26), (26, 40), (13, 40)):
        lo, hi = mel_bank(m_lo).boundaries, mel_bank(m_hi).boundaries
        assert np.all(hi[2:] - hi[:-2] <= np.interp(hi[1:-1], lo[1:-1], lo[2:] - lo[:-2]) + 1e-9)


@given(start=st.floats(0, 7000), width_mel=st.floats(450, 2000))
@settings(max_examples=60, deadline=None)
def test_finer_bank_has_more_boundaries_in_wide_intervals(start, width_mel):
    lo_mel = hz_to_mel(start)
    hi_hz = float(mel_to_hz(min(lo_mel + width_mel, hz_to_mel(8000.0))))
    if hz_to_mel(hi_hz) - lo_mel < 450:
        return
    counts = []
    for M in (13, 26, 40):
        b = mel_bank(M).boundaries
        counts.append(int(np.sum((b > start) & (b < hi_hz))))
    assert counts[0] < counts[1] < counts[2]


def test_degenerate_bank_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        build_mel_filterbank(120, 16000, 128)
    with pytest.raises(ValueError):
        build_mel_filterbank(1)
    with pytest.raises(ValueError):
        build_mel_filterbank(26, f_lo=9000, f_hi=8000)


def test_bank_is_read_only():
    bank = mel_bank(13)
    with pytest.raises(ValueError):
        bank.weights[0, 0] = 2.0


# -- MFBF and CMN ------------------------------------------------------------

def test_zero_waveform_hits_floor():
    f = extract_mfbf(Waveform(np.zeros(48000), 16000), mel_bank(26))
    assert f.shape == (26, 300)
    np.testing.assert_array_equal(f, np.log(LOG_FLOOR))


def test_mfbf_matches_manual_pipeline():
    x = np.random.default_rng(4).standard_normal(4000) * 0.1
    w = Waveform(x, 16000)
    bank = mel_bank(13)
    frames = frame_signal(w)
    manual = np.log(np.maximum(bank.weights @ np.array([dft_power(fr, 512) for fr in frames]).T, 1e-10))
    np.testing.assert_allclose(extract_mfbf(w, bank), manual, atol=1e-9)


def test_doubling_amplitude_adds_log4():
    x = np.random.default_rng(5).standard_normal(16000) * 0.05
    a = extract_mfbf(Waveform(x, 16000), mel_bank(40))
    b = extract_mfbf(Waveform(2 * x, 16000), mel_bank(40))
    np.testing.assert_allclose(b - a, np.log(4.0), atol=1e-9)


def test_sample_rate_mismatch():
    with pytest.raises(ValueError, match="Hz"):
        extract_mfbf(Waveform(np.ones(8000), 8000), mel_bank(26))


def test_cmn_properties():
    f = np.random.default_rng(6).standard_normal((26, 300)) * 5 + 3
    g = apply_cmn(f)
    assert np.max(np.abs(g.mean(axis=1))) < 1e-9
    np.testing.assert_allclose(apply_cmn(g), g, atol=1e-12)
    np.testing.assert_allclose(g.var(axis=1), f.var(axis=1), rtol=1e-12)
    assert not apply_cmn(np.full((4, 9), 2.5)).any()


def test_utterance_features_shape():
    w = Waveform(np.random.default_rng(0).standard_normal(48000), 16000)
    for M in (13, 26, 40):
        f = utterance_features(w, M)
        assert f.shape == (M, 300)
        assert np.max(np.abs(f.mean(axis=1))) < 1e-9


def test_feature_file_roundtrip_and_layout(tmp_path):
    f = np.random.default_rng(1).standard_normal((13, 7))
    p = feature_path(tmp_path, "spk000_utt001", 13)
    assert p.name == "spk000_utt001.mfbf13"
    write_features(p, f)
    blob = p.read_bytes()
    assert blob[:4] == b"MFBF"
    assert np.frombuffer(blob[4:16], "<u4").tolist() == [1, 13, 7]
    assert blob[16:24] == np.float64(f[0, 0]).astype("<f8").tobytes()
    assert blob[24:32] == np.float64(f[0, 1]).astype("<f8").tobytes()
    np.testing.assert_array_equal(read_features(p), f)


def test_feature_file_rejects_corruption(tmp_path):
    p = tmp_path / "x.mfbf13"
    write_features(p, np.zeros((2, 3)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="expected"):
        read_features(p)
    p.write_bytes(b"XXXX" + b"\x00" * 20)
    with pytest.raises(ValueError, match="not an MFBF"):
        read_features(p)
    with pytest.raises(ValueError):
        write_features(p, np.array([[np.nan]]))
