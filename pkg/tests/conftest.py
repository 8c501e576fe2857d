import numpy as np
import pytest

from dualenc import autodiff as ad
from dualenc.data import MiniBatch, Vocabulary, make_caption, make_pairs
from dualenc.encoders import ModelConfig
from dualenc.synthetic import generate_corpus

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def micro_config(**overrides) -> ModelConfig:
    base = dict(video_dim=8, vocab_size=20, hidden=6, filters=4, word_dim=5, common_dim=10)
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng: np.random.Generator, batch: int = 4, dim: int = 8, vocab: int = 20,
                 max_frames: int = 5, max_words: int = 6, video_ids=None) -> MiniBatch:
    flen = rng.integers(1, max_frames + 1, size=batch)
    flen[0] = max_frames
    frames = np.zeros((batch, max_frames, dim))
    for i, n in enumerate(flen):
        frames[i, :n] = rng.normal(size=(n, dim))
    tlen = rng.integers(1, max_words + 1, size=batch)
    tlen[0] = max_words
    tokens = np.zeros((batch, max_words), dtype=np.int64)
    for i, n in enumerate(tlen):
        tokens[i, :n] = rng.integers(0, vocab, size=n)
    ids = video_ids if video_ids is not None else [f"v{i}" for i in range(batch)]
    return MiniBatch(frames, flen, tokens, tlen, list(ids), [f"c{i}" for i in range(batch)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with ad.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def synthetic():
    """The 32-video x 2-caption generated corpus, ready for training."""
    videos, records = generate_corpus(seed=0)
    vocab = Vocabulary.build([text for _, _, text in records])
    captions = [make_caption(c, v, t, vocab) for c, v, t in records]
    return {"videos": videos, "records": records, "vocab": vocab, "captions": captions,
            "pairs": make_pairs(videos, captions)}
