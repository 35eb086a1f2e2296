"""Framing, power spectra, Mel filter banks and MFBF extraction.

``MFBF_M`` is the natural log of the M-band mel-weighted power spectrum of
each frame, floored at ``LOG_FLOOR``. Features are ``M x T`` arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Waveform

LOG_FLOOR = 1e-10
FEATURE_MAGIC = b"MFBF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class FrameConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    window: str = "hamming"

    def __post_init__(self):
        if not self.frame_ms > self.hop_ms > 0:
            raise ValueError("need frame_ms > hop_ms > 0")
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    def frame_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))


def hamming(n: int) -> np.ndarray:
    # symmetric form: 0.54 - 0.46 cos(2 pi k / (N - 1))
    return np.hamming(n)


def frame_signal(w: Waveform, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Split ``w`` into ``floor(len / hop)`` windowed frames (T x frame_samples).

    Frames running past the end of the signal are zero-padded.
    """
    win = cfg.frame_samples(w.sample_rate)
    hop = cfg.hop_samples(w.sample_rate)
    if win > cfg.fft_size:
        raise ValueError(f"frame of {win} samples exceeds fft_size {cfg.fft_size}")
    n = w.samples.size
    if n < hop:
        raise ValueError(f"signal of {n} samples is shorter than one hop ({hop})")
    n_frames = n // hop
    padded = np.zeros((n_frames - 1) * hop + win)
    m = min(n, padded.size)
    padded[:m] = w.samples[:m]
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    return padded[idx] * hamming(win)


def power_spectrum(frames: np.ndarray, fft_size: int = 512) -> np.ndarray:
    """``|rfft(frame, fft_size)|**2`` over bins ``0..fft_size/2``; works row-wise."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] > fft_size:
        raise ValueError("frame longer than fft_size")
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterBank:
    """``M`` triangular filters with unit peaks, as a ``M x (fft_size/2+1)`` matrix."""

    M: int
    sample_rate: int
    fft_size: int
    f_lo: float
    f_hi: float
    boundaries: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def centers(self) -> np.ndarray:
        return self.boundaries[1:-1]

    @property
    def bin_freqs(self) -> np.ndarray:
        return np.arange(self.fft_size // 2 + 1) * self.sample_rate / self.fft_size

    def response(self, freqs) -> np.ndarray:
        """Evaluate every triangle at arbitrary frequencies (Hz); shape ``M x len(freqs)``."""
        return triangle_response(self.boundaries, np.atleast_1d(freqs))


def triangle_response(boundaries: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    lo = boundaries[:-2, None]
    mid = boundaries[1:-1, None]
    hi = boundaries[2:, None]
    k = freqs[None, :]
    rising = (k - lo) / (mid - lo)
    falling = (hi - k) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, 1.0)


def build_mel_filterbank(M: int, sample_rate: int = 16000, fft_size: int = 512,
                         f_lo: float = 0.0, f_hi: float | None = None) -> MelFilterBank:
    if f_hi is None:
        f_hi = sample_rate / 2.0
    if M < 2:
        raise ValueError("need at least two filters")
    if not 0.0 <= f_lo < f_hi <= sample_rate / 2.0:
        raise ValueError(f"need 0 <= f_lo < f_hi <= {sample_rate / 2}")
    mels = np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), M + 2)
    boundaries = mel_to_hz(mels)
    boundaries[0], boundaries[-1] = f_lo, f_hi
    if np.any(np.diff(boundaries) <= 0):
        raise ValueError("filter boundaries are not strictly increasing")
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    weights = triangle_response(boundaries, freqs)
    empty = np.flatnonzero(weights.max(axis=1) <= 0.0)
    if empty.size:
        raise ValueError(
            f"degenerate filter bank: filters {empty.tolist()} cover no FFT bin "
            f"(M={M}, fft_size={fft_size}); use fewer filters or a larger FFT")
    boundaries.setflags(write=False)
    weights.setflags(write=False)
    return MelFilterBank(M, sample_rate, fft_size, float(f_lo), float(f_hi), boundaries, weights)


def extract_mfbf(w: Waveform, bank: MelFilterBank, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    if bank.sample_rate != w.sample_rate:
        raise ValueError(
            f"filter bank built for {bank.sample_rate} Hz, waveform is {w.sample_rate} Hz")
    if bank.fft_size != cfg.fft_size:
        raise ValueError("filter bank and frame config disagree on fft_size")
    power = power_spectrum(frame_signal(w, cfg), cfg.fft_size)
    return np.log(np.maximum(bank.weights @ power.T, LOG_FLOOR))


def apply_cmn(f: np.ndarray) -> np.ndarray:
    """Subtract each row's mean over time."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] < 1:
        raise ValueError("expected a D x T matrix with T >= 1")
    return f - f.mean(axis=1, keepdims=True)


_BANKS: dict = {}


def mel_bank(M: int, sample_rate: int = 16000, fft_size: int = 512) -> MelFilterBank:
    """Cached default-range bank (0 Hz to Nyquist)."""
    key = (M, sample_rate, fft_size)
    if key not in _BANKS:
        _BANKS[key] = build_mel_filterbank(M, sample_rate, fft_size)
    return _BANKS[key]


def utterance_features(w: Waveform, M: int, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Full front end: MFBF_M followed by CMN."""
    return apply_cmn(extract_mfbf(w, mel_bank(M, w.sample_rate, cfg.fft_size), cfg))


# -- feature files ---------------------------------------------------------

def write_features(path, f: np.ndarray) -> None:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("features must be D x T")
    if not np.all(np.isfinite(f)):
        raise ValueError("features contain non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, *f.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f, dtype="<f8").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not an MFBF feature file")
    version, d, t = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    body = blob[16:]
    if len(body) != 8 * d * t:
        raise ValueError(f"{path}: expected {d}x{t} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(d, t).astype(np.float64)


def feature_path(features_dir, utt_id: str, M: int) -> Path:
    return Path(features_dir) / f"{utt_id}.mfbf{M}"
