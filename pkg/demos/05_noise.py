"""
Recognition under white noise
=============================

Train one CG-PCNN on a toy corpus, then score its test set with seeded
white noise mixed into the raw audio at several SNRs.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from cgpcnn.corpus import (SynthCorpusConfig, add_white_noise, load_wav, read_manifest,
                           signal_power, synth_speaker_corpus)
from cgpcnn.experiment import DESK_GEOMETRY, TrainConfig, evaluate, extract_corpus, train

root = Path(tempfile.mkdtemp(prefix="noise_"))
synth_speaker_corpus(SynthCorpusConfig(), root)
manifest = root / "manifest.jsonl"
records = read_manifest(manifest)
extract_corpus(records, (26, 40), root / "features")

# %%
# The injected noise is rescaled to its own empirical power, so the
# realised SNR equals the requested one.
clean = load_wav(records[0].path)
for snr in (25, 30):
    noisy = add_white_noise(clean, snr, seed=0)
    got = 10 * np.log10(signal_power(clean.samples) / signal_power(noisy.samples - clean.samples))
    print(f"requested {snr} dB, measured {got:.6f} dB")

# %%
cfg = TrainConfig(train_manifest=str(manifest), features_dir=str(root / "features"),
                  checkpoint=str(root / "cg.cgpn"), **DESK_GEOMETRY)
net, res = train(cfg)
test = [r for r in records if r.split == "test"]
print(f"clean: {evaluate(root / 'cg.cgpn', test, (26, 40), features_dir=root / 'features'):.1f}%")
for snr in (10, 20, 25, 30, 40):
    print(f"{snr:2d} dB: {evaluate(net, test, (26, 40), noise=(snr, 0)):.1f}%")
