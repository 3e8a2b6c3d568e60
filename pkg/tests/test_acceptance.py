"""Desk-scale runs on the bundled corpus; minutes each, deselect with -m "not slow" """

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from core.model import Encoder
from core.numerics import backward, check_gradients
from core.positional import Positions
from core.state import precision
from managers.checkpoint import save_checkpoint
from managers.config import resolve_config
from managers.corpus import build_corpus, load_vocab
from managers.probes import run_probe
from managers.training import TrainConfig, mask_tokens, train

ROOT = Path(__file__).resolve().parent.parent

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk():
    config = resolve_config(ROOT / "configs" / "desk.toml", [f"corpus={ROOT / 'data' / 'corpus'}",
                                                            f"vocab={ROOT / 'data' / 'vocab.txt'}"])
    vocab = load_vocab(config.vocab)
    docs = build_corpus(config.corpus, vocab, config.max_len, config.concat)
    return config, vocab, docs


@pytest.fixture(scope="module")
def trained(desk):
    config, vocab, docs = desk
    cache = {}

    def _train(variant="dstg", mlm_scope="semantic_only"):
        key = (variant, mlm_scope)
        if key not in cache:
            run = replace(config, variant=variant, mlm_scope=mlm_scope)
            cache[key] = train(run.model_config(len(vocab)), run.train_config(), docs, vocab, max_len=config.max_len)
        return cache[key]

    return _train


def test_desk_loss_drops(trained):
    losses = [loss for _, _, loss in trained().losses]
    assert len(losses) == 300
    assert np.mean(losses[-10:]) <= 0.6 * np.mean(losses[:10])


def test_desk_training_is_byte_identical(trained, desk, tmp_path):
    config, vocab, docs = desk
    again = train(config.model_config(len(vocab)), config.train_config(), docs, vocab, max_len=config.max_len)
    assert again.losses == trained().losses
    a = save_checkpoint(tmp_path / "a", trained().checkpoint)
    b = save_checkpoint(tmp_path / "b", again.checkpoint)
    for name in ("manifest.json", "tensors.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_token_position_probe_ordering(trained, desk):
    _, _, docs = desk
    dstg = run_probe(trained("dstg").checkpoint.encoder, docs, "token_ap", seeds=5)
    rope = run_probe(trained("rope").checkpoint.encoder, docs, "token_ap", seeds=5)
    assert dstg.cell(0, "ap").r2_mean > rope.cell(0, "hidden").r2_mean
    for cell in rope.cells:
        best = max(c.r2_mean for c in dstg.present() if c.layer == cell.layer)
        assert best > cell.r2_mean, f"layer {cell.layer}"


def test_full_scope_loses_position_in_last_layer(trained, desk):
    _, vocab, docs = desk
    encoder = trained("dstg", "full").checkpoint.encoder
    last = encoder.config.layers

    doc = docs[0]
    ids, labels = mask_tokens(doc, np.random.default_rng(0), TrainConfig(), vocab)
    loss, trace = encoder.mlm_loss(ids, labels, Positions.assign(len(doc)), doc.special_mask)
    backward(loss)
    assert np.any(trace.final.x_ap.grad != 0)
    encoder.zero_grad()

    report = run_probe(encoder, docs, "token_ap", seeds=5)
    assert report.cell(last, "ap").r2_mean < report.cell(last - 1, "ap").r2_mean


def test_desk_encoder_gradients(desk):
    config, vocab, docs = desk
    doc = docs[0]
    ids, labels = mask_tokens(doc, np.random.default_rng(5), TrainConfig(), vocab)
    with precision():
        encoder = Encoder.initialize(config.model_config(len(vocab)), seed=3)
        rng = np.random.default_rng(11)
        for name, p in encoder.params.items():
            if name.endswith("rp_table"):
                p.data[...] = rng.normal(scale=0.5, size=p.shape)
        positions = Positions.assign(len(doc), shift=7)

        def loss_fn():
            return encoder.mlm_loss(ids, labels, positions, doc.special_mask)[0]

        report = check_gradients(loss_fn, encoder.params, coords=50, rng=np.random.default_rng(0))
    assert report.passed(1e-3), report.worst
