import pytest

from vsrlab import corpus

_acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Shared sink for the per-criterion pass/fail lines."""
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small 2-speaker corpus shared by pipeline-level tests (read only)."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    lexicon = corpus.default_lexicon(n_words=6, seed=0)
    spec = corpus.SynthSpec(lexicon=lexicon, n_speakers=2, n_utterances=10,
                            words_per_utterance=(1, 2), seed=0)
    records = corpus.synthesize_corpus(spec, out)
    return out, records
