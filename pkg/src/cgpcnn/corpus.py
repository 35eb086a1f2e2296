"""Waveform I/O, toy speaker corpus synthesis, noise injection and manifests.

WAV files are RIFF PCM16 mono. Manifests are JSON Lines with one
utterance record per line (``id``, ``speaker``, ``path``, ``split``).
"""

from __future__ import annotations

import json
import os
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "test")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    speaker: str
    path: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class SynthCorpusConfig:
    n_speakers: int = 8
    utterances_per_speaker: int = 10
    train_per_speaker: int = 5
    duration_s: float = 3.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        for name in ("n_speakers", "utterances_per_speaker", "train_per_speaker", "sample_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.train_per_speaker >= self.utterances_per_speaker:
            raise ValueError("train_per_speaker must be < utterances_per_speaker")
        n = self.duration_s * self.sample_rate
        if self.duration_s <= 0 or abs(n - round(n)) > 1e-9:
            raise ValueError("duration_s * sample_rate must be a positive integer sample count")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


# -- WAV -------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM WAV file ({exc})") from exc
    except EOFError as exc:
        raise ValueError(f"{path}: truncated or empty WAV container") from exc
    if n_channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {n_channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise ValueError(f"{path}: WAV file has no samples")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    """Write ``w`` as PCM16 mono, clipping to the representable range."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


# -- signal manipulation ---------------------------------------------------

def segment_utterance(w: Waveform, duration_s: float = 3.0) -> Waveform:
    """Truncate or tail-pad with zeros to exactly ``duration_s`` seconds."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    if w.samples.size == 0:
        raise ValueError("cannot segment an empty waveform")
    n = int(round(duration_s * w.sample_rate))
    out = np.zeros(n)
    k = min(n, w.samples.size)
    out[:k] = w.samples[:k]
    return Waveform(out, w.sample_rate)


def signal_power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def add_white_noise(w: Waveform, snr_db: float, seed: int) -> Waveform:
    """Mix in seeded Gaussian white noise at ``snr_db`` (mean-square powers).

    The drawn noise is rescaled by its own empirical power, so the SNR of the
    returned (clean, noise) pair matches ``snr_db`` up to rounding.
    """
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    p_signal = signal_power(w.samples)
    if p_signal <= 0.0:
        raise ValueError("SNR is undefined for an all-zero signal")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(w.samples.size)
    noise -= noise.mean()
    p_target = p_signal / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(p_target / signal_power(noise))
    return Waveform(w.samples + noise, w.sample_rate)


# -- synthetic speakers ----------------------------------------------------

# rough adult vowel targets (F1, F2, F3) in Hz; voices rescale and perturb them
BASE_VOWELS = ((730, 1090, 2440), (270, 2290, 3010), (300, 870, 2240),
               (530, 1840, 2480), (570, 840, 2410), (660, 1720, 2410))


@dataclass(frozen=True)
class VoiceSignature:
    f0: float
    vowels: tuple          # per-vowel (F1, F2, F3) after vocal tract scaling
    bandwidths: tuple
    tilt_db_per_octave: float


def draw_voice(rng: np.random.Generator) -> VoiceSignature:
    """A speaker: pitch, vocal tract length scaling, idiolect offsets and tilt."""
    scale = rng.uniform(0.82, 1.22)
    vowels = tuple(tuple(float(f * scale * (1.0 + rng.normal(0, 0.06))) for f in v)
                   for v in BASE_VOWELS)
    bandwidths = (rng.uniform(60, 120), rng.uniform(80, 160), rng.uniform(120, 220))
    return VoiceSignature(
        f0=float(rng.uniform(90, 260)),
        vowels=vowels,
        bandwidths=tuple(float(b) for b in bandwidths),
        tilt_db_per_octave=float(rng.uniform(-12, -4)),
    )


def _envelope(freqs, formants, bandwidths, tilt_db):
    """Sum of resonance magnitudes times a spectral tilt; ``formants`` may be
    per-time (``n_formants x T``) with ``freqs`` of shape ``H x T``."""
    gain = np.zeros_like(freqs)
    for fc, bw in zip(formants, bandwidths):
        gain += 1.0 / np.sqrt(1.0 + ((freqs - fc) / (0.5 * bw)) ** 2)
    tilt = 10.0 ** (tilt_db * np.log2(np.maximum(freqs, 1.0) / 100.0) / 20.0)
    return gain * tilt


def _formant_tracks(voice: VoiceSignature, n_ctrl: int, ctrl_rate: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Syllable sequence of vowel targets with smoothed transitions.

    Returns formant tracks (3 x n_ctrl) and a voicing envelope (n_ctrl,).
    """
    targets = np.empty((3, n_ctrl))
    voicing = np.empty(n_ctrl)
    i = 0
    while i < n_ctrl:
        n = int(rng.uniform(0.12, 0.32) * ctrl_rate)
        v = np.asarray(voice.vowels[rng.integers(len(voice.vowels))])
        targets[:, i:i + n] = v[:, None] * (1.0 + rng.normal(0, 0.02, (3, 1)))
        # syllable nucleus loud in the middle, softer at the edges
        ramp = np.sin(np.pi * (np.arange(min(n, n_ctrl - i)) + 0.5) / n)
        voicing[i:i + n] = 0.15 + 0.85 * ramp
        i += n
    k = max(1, int(0.03 * ctrl_rate))
    kernel = np.hanning(2 * k + 1)
    kernel /= kernel.sum()
    padded = np.pad(targets, ((0, 0), (k, k)), mode="edge")
    tracks = np.stack([np.convolve(row, kernel, mode="valid") for row in padded])
    return tracks, voicing


def synth_utterance(voice: VoiceSignature, n_samples: int, sample_rate: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Harmonic source through time-varying formants, with per-utterance jitter."""
    t = np.arange(n_samples) / sample_rate
    f0 = voice.f0 * (1.0 + rng.uniform(-0.04, 0.04))
    wobble = rng.uniform(0.01, 0.03) * np.sin(2 * np.pi * rng.uniform(3, 7) * t + rng.uniform(0, 2 * np.pi))
    drift = rng.uniform(-0.08, 0.08) * (t / t[-1] - 0.5)
    f0_t = f0 * (1.0 + wobble + drift)
    phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate

    # spectral shape is computed on a 200 Hz control grid, then interpolated
    ctrl_rate = 200.0
    n_ctrl = int(np.ceil(n_samples * ctrl_rate / sample_rate)) + 1
    tc = np.arange(n_ctrl) / ctrl_rate
    tracks, voicing = _formant_tracks(voice, n_ctrl, ctrl_rate, rng)
    tilt = voice.tilt_db_per_octave + rng.normal(0, 1.0)
    n_harm = int((0.5 * sample_rate - 200) // (f0 * 1.15))
    k = np.arange(1, n_harm + 1)[:, None]
    f0_c = np.interp(tc, t, f0_t)
    amps = _envelope(k * f0_c[None, :], tracks, voice.bandwidths, tilt) * voicing[None, :]
    offsets = rng.uniform(0, 2 * np.pi, n_harm)

    x = np.zeros(n_samples)
    for h in range(n_harm):
        x += np.interp(t, tc, amps[h]) * np.sin((h + 1) * phase + offsets[h])

    x /= np.max(np.abs(x))
    x *= 0.5 * rng.uniform(0.5, 1.0)
    x += 2e-3 * rng.standard_normal(n_samples)
    return x


def speaker_voices(n_speakers: int, seed: int) -> list[VoiceSignature]:
    rng = np.random.default_rng([seed, 0])
    return [draw_voice(rng) for _ in range(n_speakers)]


def synth_speaker_corpus(cfg: SynthCorpusConfig, out_dir) -> list[UtteranceRecord]:
    """Write ``n_speakers * utterances_per_speaker`` WAVs plus ``manifest.jsonl``.

    Paths in the manifest are relative to ``out_dir``. The output is a pure
    function of ``cfg``.
    """
    out_dir = Path(out_dir)
    voices = speaker_voices(cfg.n_speakers, cfg.seed)
    records = []
    for s, voice in enumerate(voices):
        speaker = f"spk{s:03d}"
        for u in range(cfg.utterances_per_speaker):
            rng = np.random.default_rng([cfg.seed, 1, s, u])
            x = synth_utterance(voice, cfg.n_samples, cfg.sample_rate, rng)
            uid = f"{speaker}_utt{u:03d}"
            rel = Path("wav") / speaker / f"{uid}.wav"
            write_wav(out_dir / rel, Waveform(x, cfg.sample_rate))
            records.append(UtteranceRecord(uid, speaker, rel.as_posix(), "train"))
    train, test = split_manifest(records, cfg.train_per_speaker, cfg.seed)
    records = sorted(train + test, key=lambda r: r.id)
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


# -- manifests -------------------------------------------------------------

def split_manifest(records: Sequence[UtteranceRecord], train_per_speaker: int,
                   seed: int) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    by_speaker: dict[str, list[UtteranceRecord]] = {}
    for r in records:
        by_speaker.setdefault(r.speaker, []).append(r)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("utterance ids must be unique")

    rng = np.random.default_rng(seed)
    train, test = [], []
    for speaker in sorted(by_speaker):
        utts = sorted(by_speaker[speaker], key=lambda r: r.id)
        if len(utts) < train_per_speaker + 1:
            raise ValueError(
                f"speaker {speaker} has {len(utts)} utterances, "
                f"needs at least {train_per_speaker + 1}")
        order = rng.permutation(len(utts))
        for rank, idx in enumerate(order):
            r = utts[idx]
            split = "train" if rank < train_per_speaker else "test"
            (train if split == "train" else test).append(
                UtteranceRecord(r.id, r.speaker, r.path, split))
    train.sort(key=lambda r: r.id)
    test.sort(key=lambda r: r.id)
    return train, test


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path) -> list[UtteranceRecord]:
    """Load a JSONL manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = UtteranceRecord(d["id"], d["speaker"], d["path"], d["split"])
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
            if not os.path.isabs(rec.path):
                rec = UtteranceRecord(rec.id, rec.speaker, str(base / rec.path), rec.split)
            records.append(rec)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate utterance ids")
    return records


def speaker_index(records: Sequence[UtteranceRecord]) -> dict[str, int]:
    return {s: i for i, s in enumerate(sorted({r.speaker for r in records}))}
