"""
Mel filter-bank features
========================

From a synthetic voice to CMN-normalised log mel filter-bank energies at
three filter counts. Run with ``python3 demos/01_features.py``.
"""

# %%
# A single three second utterance of one synthetic speaker.
import numpy as np

from cgpcnn.corpus import Waveform, draw_voice, synth_utterance
from cgpcnn.features import frame_signal, hz_to_mel, mel_bank, utterance_features

voice = draw_voice(np.random.default_rng(0))
x = synth_utterance(voice, 48000, 16000, np.random.default_rng(1))
w = Waveform(x, 16000)
print(f"f0 {voice.f0:.0f} Hz, {w.duration:.1f} s, peak {np.abs(x).max():.3f}")

# %%
# 25 ms Hamming frames every 10 ms: 300 frames of 400 samples.
frames = frame_signal(w)
print("frames:", frames.shape)

# %%
# Filters are equally spaced on the mel scale, so they widen with frequency.
# More filters means narrower bands everywhere.
for M in (13, 26, 40):
    b = mel_bank(M).boundaries
    widths = b[2:] - b[:-2]
    in_band = int(np.sum((b > 320) & (b < 1500)))
    print(f"M={M:2d}: first band {widths[0]:6.1f} Hz, last band {widths[-1]:7.1f} Hz, "
          f"{in_band} boundaries in 320-1500 Hz")
print(f"mel(700 Hz) = {hz_to_mel(700.0):.4f}")

# %%
# Log energies with per-utterance mean normalisation: every row averages to 0.
for M in (13, 26, 40):
    f = utterance_features(w, M)
    print(f"MFBF{M}: shape {f.shape}, max |row mean| {np.abs(f.mean(axis=1)).max():.1e}, "
          f"range [{f.min():.1f}, {f.max():.1f}]")
