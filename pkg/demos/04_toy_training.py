"""
Training on a toy speaker corpus
================================

Synthesize 8 speakers, extract features, train CG-PCNN and the two
baselines on the same split and compare test recognition rates. Takes a
few minutes on one core.
"""

# %%
import tempfile
from pathlib import Path

from cgpcnn.corpus import SynthCorpusConfig, read_manifest, split_manifest, synth_speaker_corpus
from cgpcnn.experiment import DESK_GEOMETRY, TrainConfig, extract_corpus, fit, load_feature_set

root = Path(tempfile.mkdtemp(prefix="toy_"))
cfg = SynthCorpusConfig(n_speakers=8, utterances_per_speaker=10, train_per_speaker=5)
synth_speaker_corpus(cfg, root)
records = read_manifest(root / "manifest.jsonl")
extract_corpus(records, (26, 40), root / "features")
speakers = sorted({r.speaker for r in records})
print(f"{len(records)} utterances in {root}")

# %%
# The desk geometry shrinks every layer so 200 epochs fit in about a minute.
print("geometry:", DESK_GEOMETRY)
train_recs, test_recs = split_manifest(records, cfg.train_per_speaker, seed=0)
cache = {}
for arch in ("CG-PCNN", "PCNN", "SFAN"):
    tc = TrainConfig(architecture=arch, feature_pair=(26, 40), seed=0, **DESK_GEOMETRY)
    tr = load_feature_set(train_recs, tc.input_dims, speakers, root / "features", cache=cache)
    te = load_feature_set(test_recs, tc.input_dims, speakers, root / "features", cache=cache)
    net, res = fit(tc, tr, len(speakers), te)
    print(f"{arch:8s} train {res.train_accuracy:5.1f}%  test {res.test_accuracy:5.1f}%  "
          f"final loss {res.loss_trace[-1]:.4f}  {res.seconds:.0f}s")
