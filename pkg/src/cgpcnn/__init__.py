"""Multi-resolution MFBF features and cross-gated parallel CNNs for speaker ID.

Modules:
    corpus      WAV I/O, manifests, segmentation, noise, synthetic voices
    features    framing, power spectra, mel filter banks, MFBF + CMN
    autodiff    reverse-mode tensors, Adam, finite-difference checks
    models      CG-PCNN, PCNN, G-PCNN and SFAN networks
    experiment  training, evaluation, ablation, gradient and shape audits
    cli         ``cgpcnn`` command line
"""

from .autodiff import Adam, DivergenceError, Parameter, Tensor, backward, finite_diff_check
from .corpus import (SynthCorpusConfig, UtteranceRecord, Waveform, add_white_noise, load_wav,
                     read_manifest, segment_utterance, synth_speaker_corpus, write_manifest, write_wav)
from .experiment import (AuditError, TrainConfig, ablate, evaluate, gradcheck_suite, shape_audit,
                         train)
from .features import (FrameConfig, MelFilterBank, apply_cmn, build_mel_filterbank, extract_mfbf,
                       power_spectrum, utterance_features)
from .models import ARCHITECTURES, Network, NetworkSpec, build_network

__version__ = "0.1.0"
