import hashlib
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgpcnn.corpus import (SynthCorpusConfig, UtteranceRecord, Waveform, add_white_noise, load_wav,
                           read_manifest, segment_utterance, signal_power, speaker_voices,
                           split_manifest, synth_speaker_corpus, write_manifest, write_wav)


def _write_raw(path, frames: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(frames)


def test_load_zero_file(tmp_path):
    p = tmp_path / "z.wav"
    _write_raw(p, b"\x00\x00" * 48000)
    w = load_wav(p)
    assert w.sample_rate == 16000
    assert w.samples.shape == (48000,)
    assert not w.samples.any()


def test_load_half_scale(tmp_path):
    p = tmp_path / "h.wav"
    _write_raw(p, struct.pack("<3h", 16384, -16384, -32768))
    np.testing.assert_array_equal(load_wav(p).samples, [0.5, -0.5, -1.0])


def test_wav_roundtrip_within_quantization(tmp_path):
    x = np.random.default_rng(3).uniform(-0.9, 0.9, 8000)
    write_wav(tmp_path / "r.wav", Waveform(x, 16000))
    y = load_wav(tmp_path / "r.wav").samples
    assert np.max(np.abs(x - y)) <= 1.0 / 32768


def test_wav_header_is_riff_pcm16(tmp_path):
    write_wav(tmp_path / "a.wav", Waveform(np.zeros(10), 16000))
    blob = (tmp_path / "a.wav").read_bytes()
    assert blob[:4] == b"RIFF" and blob[8:12] == b"WAVE"
    fmt_tag, channels, rate = struct.unpack("<HHI", blob[20:28])
    bits = struct.unpack("<H", blob[34:36])[0]
    assert (fmt_tag, channels, rate, bits) == (1, 1, 16000, 16)


def test_load_rejects_stereo_and_8bit(tmp_path):
    _write_raw(tmp_path / "s.wav", b"\x00" * 40, channels=2)
    _write_raw(tmp_path / "b.wav", b"\x80" * 40, width=1)
    with pytest.raises(ValueError, match="mono"):
        load_wav(tmp_path / "s.wav")
    with pytest.raises(ValueError, match="16-bit"):
        load_wav(tmp_path / "b.wav")


def test_load_missing_and_garbage(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")
    (tmp_path / "g.wav").write_bytes(b"not a wav at all")
    with pytest.raises(ValueError):
        load_wav(tmp_path / "g.wav")


def test_load_rejects_empty(tmp_path):
    _write_raw(tmp_path / "e.wav", b"")
    with pytest.raises(ValueError):
        load_wav(tmp_path / "e.wav")


def test_segment_cases():
    rng = np.random.default_rng(0)
    four = Waveform(rng.standard_normal(64000), 16000)
    out = segment_utterance(four, 3.0)
    np.testing.assert_array_equal(out.samples, four.samples[:48000])

    two = Waveform(rng.standard_normal(32000), 16000)
    out = segment_utterance(two, 3.0)
    np.testing.assert_array_equal(out.samples[:32000], two.samples)
    assert out.samples.size == 48000 and not out.samples[32000:].any()

    three = Waveform(rng.standard_normal(48000), 16000)
    np.testing.assert_array_equal(segment_utterance(three, 3.0).samples, three.samples)


@given(n=st.integers(1, 40000), dur=st.floats(0.01, 3.0))
@settings(max_examples=40, deadline=None)
def test_segment_length_property(n, dur):
    w = Waveform(np.ones(n), 8000)
    assert segment_utterance(w, dur).samples.size == round(dur * 8000)


def test_segment_rejects_empty_and_bad_duration():
    with pytest.raises(ValueError):
        segment_utterance(Waveform(np.ones(10), 16000), 0.0)
    with pytest.raises(ValueError, match="empty"):
        segment_utterance(Waveform(np.zeros(0), 16000), 3.0)


@pytest.mark.parametrize("snr", [0.0, 25.0, 30.0])
def test_noise_power_matches_target(snr):
    x = np.sin(np.linspace(0, 900, 48000)) * np.hanning(48000)
    w = Waveform(x, 16000)
    noisy = add_white_noise(w, snr, seed=11)
    n = noisy.samples - x
    assert abs(np.mean(n)) < 1e-12
    np.testing.assert_allclose(signal_power(n), signal_power(x) / 10 ** (snr / 10), rtol=1e-9)
    measured = 10 * np.log10(signal_power(x) / signal_power(n))
    assert abs(measured - snr) < 0.1


def test_noise_deterministic_and_seed_sensitive():
    w = Waveform(np.random.default_rng(1).standard_normal(16000), 16000)
    a = add_white_noise(w, 25, 5).samples
    np.testing.assert_array_equal(a, add_white_noise(w, 25, 5).samples)
    assert not np.array_equal(a, add_white_noise(w, 25, 6).samples)


def test_noise_rejects_silence():
    with pytest.raises(ValueError, match="zero"):
        add_white_noise(Waveform(np.zeros(100), 16000), 25, 0)


def _records(n_spk, n_utt):
    return [UtteranceRecord(f"s{s}_u{u}", f"s{s}", f"x/{s}_{u}.wav", "train")
            for s in range(n_spk) for u in range(n_utt)]


def test_split_counts_and_disjoint():
    train, test = split_manifest(_records(8, 10), 5, seed=2)
    assert len(train) == len(test) == 40
    assert not {r.id for r in train} & {r.id for r in test}
    for s in range(8):
        assert sum(r.speaker == f"s{s}" for r in train) == 5
    assert all(r.split == "train" for r in train) and all(r.split == "test" for r in test)


def test_split_all_but_one_and_determinism():
    recs = _records(4, 6)
    train, test = split_manifest(recs, 5, seed=9)
    assert sorted(r.speaker for r in test) == ["s0", "s1", "s2", "s3"]
    assert split_manifest(recs, 5, seed=9) == (train, test)
    assert split_manifest(recs, 5, seed=10) != (train, test)


def test_split_rejects_short_speaker():
    with pytest.raises(ValueError, match="at least"):
        split_manifest(_records(2, 5), 5, seed=0)


def test_manifest_roundtrip(tmp_path):
    recs = [UtteranceRecord("a", "s0", "/abs/a.wav", "train"),
            UtteranceRecord("b", "s1", "/abs/b.wav", "test")]
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl") == recs


def test_manifest_rejects_duplicates_and_bad_split(tmp_path):
    line = '{"id": "a", "path": "a.wav", "speaker": "s", "split": "train"}\n'
    (tmp_path / "d.jsonl").write_text(line * 2)
    with pytest.raises(ValueError, match="duplicate"):
        read_manifest(tmp_path / "d.jsonl")
    with pytest.raises(ValueError):
        UtteranceRecord("a", "s", "p", "dev")


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_corpus_counts_and_determinism(tmp_path):
    cfg = SynthCorpusConfig(n_speakers=3, utterances_per_speaker=4, train_per_speaker=2,
                            duration_s=0.5, seed=7)
    recs = synth_speaker_corpus(cfg, tmp_path / "a")
    synth_speaker_corpus(cfg, tmp_path / "b")
    assert len(list((tmp_path / "a").rglob("*.wav"))) == 12
    assert sum(r.split == "train" for r in recs) == 6
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    loaded = read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert [r.id for r in loaded] == [r.id for r in recs]
    w = load_wav(loaded[0].path)
    assert w.samples.size == 8000 and np.max(np.abs(w.samples)) <= 0.51


def test_synth_default_shape_counts():
    cfg = SynthCorpusConfig(n_speakers=8, utterances_per_speaker=10, train_per_speaker=5, seed=7)
    assert cfg.n_samples == 48000
    train, test = split_manifest(_records(8, 10), cfg.train_per_speaker, cfg.seed)
    assert (len(train), len(test)) == (40, 40)


def test_voices_distinct_pitch():
    voices = speaker_voices(8, seed=0)
    f0 = [v.f0 for v in voices]
    assert all(90 <= f <= 260 for f in f0)
    assert len(set(f0)) == 8
    assert all(len(v.bandwidths) == 3 and all(len(t) == 3 for t in v.vowels) for v in voices)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthCorpusConfig(utterances_per_speaker=5, train_per_speaker=5)
    with pytest.raises(ValueError):
        SynthCorpusConfig(duration_s=1.00001, sample_rate=16000)
