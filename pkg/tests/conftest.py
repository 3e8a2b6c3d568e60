"""Shared fixtures: a small generated corpus, its vocabulary and tiny encoders"""

import numpy as np
import pytest

from core.model import Encoder, ModelConfig
from core.state import set_quiet, set_threads
from managers.corpus import build_corpus, build_vocab, load_vocab, write_vocab

SENTENCES = [
    "the cat sat on the mat.",
    "a dog ran to the park!",
    "is the bird in the tree?",
    "we like green apples.",
    "the sun is warm today.",
    "my friend reads a long book.",
]


def corpus_text(rotation):
    paragraphs = []
    for block in range(6):
        start = (rotation + block) % len(SENTENCES)
        picked = [SENTENCES[(start + k) % len(SENTENCES)] for k in range(4)]
        paragraphs.append(" ".join(picked))
    return "\n\n".join(paragraphs) + "\n"


@pytest.fixture(autouse=True, scope="session")
def quiet_console():
    set_quiet(True)
    set_threads(1)
    yield
    set_quiet(False)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    for i in range(2):
        (root / f"part_{i}.txt").write_text(corpus_text(i), encoding="utf-8")
    return root


@pytest.fixture(scope="session")
def tiny_vocab_path(tiny_corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("vocab") / "vocab.txt"
    return write_vocab(build_vocab(tiny_corpus, size=500), path)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_vocab_path):
    return load_vocab(tiny_vocab_path)


@pytest.fixture(scope="session")
def tiny_docs(tiny_corpus, tiny_vocab):
    return build_corpus(tiny_corpus, tiny_vocab, max_len=16)


@pytest.fixture
def make_config(tiny_vocab):
    def _make(variant="dstg", mlm_scope="semantic_only", **overrides):
        values = dict(layers=2, heads=2, d_ap=4, d_sem=8, max_positions=32, vocab_size=len(tiny_vocab), mlm_scope=mlm_scope)
        values.update(overrides)
        return ModelConfig.for_variant(variant, **values)
    return _make


@pytest.fixture
def make_encoder(make_config):
    def _make(variant="dstg", mlm_scope="semantic_only", seed=0, **overrides):
        return Encoder.initialize(make_config(variant, mlm_scope, **overrides), seed)
    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
