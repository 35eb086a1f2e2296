import pytest

from cgpcnn.corpus import SynthCorpusConfig, read_manifest, synth_speaker_corpus

# half-second utterances give 50 frames, comfortably above the 31-frame minimum
TINY = SynthCorpusConfig(n_speakers=4, utterances_per_speaker=4, train_per_speaker=2,
                         duration_s=0.5, seed=3)
TINY_NET = dict(channels=4, head_channels=6, embed_dim=5, duration_s=0.5)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synth_speaker_corpus(TINY, root)
    return root, read_manifest(root / "manifest.jsonl")


# One line per acceptance criterion, echoed in the terminal summary so the
# verdicts stay visible without ``-s``.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
