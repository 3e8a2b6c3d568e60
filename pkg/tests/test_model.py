import numpy as np
import pytest

from core.errors import ConfigError, PositionError
from core.model import (
    Encoder,
    ModelConfig,
    StreamState,
    attention_forward,
    param_specs,
    split_down_projection,
)
from core.numerics import backward, check_gradients, tensor
from core.positional import Positions
from core.state import precision


def doc_arrays(n=10, vocab_size=20, seed=3):
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, vocab_size, size=n)
    special = np.zeros(n, dtype=bool)
    special[[0, -1]] = True
    return ids, special


def spec_names(config):
    return [name for name, _, _ in param_specs(config)]


def test_param_specs_per_variant():
    dstg = ModelConfig(layers=1, heads=2, d_ap=4, d_sem=8, vocab_size=30, max_positions=16)
    names = spec_names(dstg)
    assert "ap_emb" in names and "layers.0.rp_table" in names and "layers.0.w_down_ap" in names
    shapes = {name: shape for name, shape, _ in param_specs(dstg)}
    assert shapes["layers.0.wq_sem"] == (8, 12)
    assert shapes["layers.0.w_gate"] == (12, 48)
    assert shapes["mlm_head"] == (8, 30)

    full = ModelConfig(layers=1, heads=2, d_ap=4, d_sem=8, vocab_size=30, max_positions=16, mlm_scope="full")
    assert {name: shape for name, shape, _ in param_specs(full)}["mlm_head"] == (12, 30)

    ap = ModelConfig.for_variant("ap", layers=1, heads=2, d_sem=8, vocab_size=30)
    assert "pos_emb" in spec_names(ap) and "ap_emb" not in spec_names(ap)
    assert not any("rp_table" in n for n in spec_names(ap))
    rope = ModelConfig.for_variant("rope", layers=1, heads=2, d_sem=8, vocab_size=30)
    assert [n for n in spec_names(rope) if "emb" in n or "rp_table" in n] == ["tok_emb"]
    assert any("rp_table" in n for n in spec_names(ModelConfig.for_variant("rp", layers=1, heads=2, d_sem=8)))


@pytest.mark.parametrize("kwargs", [
    {"variant": "alibi"},
    {"mlm_scope": "everything"},
    {"variant": "rope", "d_ap": 8},
    {"heads": 3},
    {"variant": "rope", "d_ap": 0, "d_sem": 12, "heads": 4},
    {"num_buckets": 2},
    {"num_buckets": 32, "max_distance": 8},
])
def test_model_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_config_dict_round_trip():
    config = ModelConfig(layers=3, mlm_scope="full")
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"layers": 2, "dropout": 0.1})


def test_forward_shapes_and_length_limit(make_encoder):
    encoder = make_encoder()
    ids, special = doc_arrays()
    trace = encoder.forward(ids, special_mask=special)
    assert len(trace.hidden) == encoder.config.layers + 1
    assert trace.final.x_ap.shape == (10, 4)
    assert trace.final.x_sem.shape == (10, 8)
    with pytest.raises(PositionError):
        encoder.forward(np.zeros(33, dtype=int))


def test_special_logits_ignore_ap_embeddings(make_encoder, rng):
    encoder = make_encoder()
    ids, special = doc_arrays()
    before = encoder.forward(ids, special_mask=special, capture_attention=True).attention[0]
    encoder.params["ap_emb"].data += rng.normal(size=encoder.params["ap_emb"].shape).astype(np.float32)
    after = encoder.forward(ids, special_mask=special, capture_attention=True).attention[0]
    for head_before, head_after in zip(before, after):
        l0, l1 = head_before.l.data, head_after.l.data
        for i in np.flatnonzero(special):
            np.testing.assert_array_equal(l0[i], l1[i])
            np.testing.assert_array_equal(l0[:, i], l1[:, i])
        assert not np.array_equal(l0[1:-1, 1:-1], l1[1:-1, 1:-1])


def test_streams_separate_under_fixed_probabilities(make_encoder, rng):
    encoder = make_encoder()
    config = encoder.config
    n = 7
    probs = [rng.dirichlet(np.ones(n), size=n) for _ in range(config.heads)]
    special = np.zeros(n, dtype=bool)
    weights = encoder.layer_weights(0)
    x_ap = rng.normal(size=(n, config.d_ap))
    x_sem = rng.normal(size=(n, config.d_sem))

    def run(ap, sem):
        state = StreamState(x_ap=tensor(ap), x_sem=tensor(sem))
        return attention_forward(state, weights, config, special, probs_override=probs)

    base = run(x_ap, x_sem)
    sem_changed = run(x_ap, x_sem + rng.normal(size=x_sem.shape))
    ap_changed = run(x_ap + rng.normal(size=x_ap.shape), x_sem)
    np.testing.assert_array_equal(base.x_ap.data, sem_changed.x_ap.data)
    np.testing.assert_array_equal(base.x_sem.data, ap_changed.x_sem.data)


def test_split_down_projection_routes_columns(make_encoder, rng):
    encoder = make_encoder()
    config = encoder.config
    weights = encoder.layer_weights(0)
    h = rng.normal(size=(5, config.d_int_ap + config.d_int_sem))
    changed = h.copy()
    changed[:, config.d_int_ap:] += 1.0
    ap_a, sem_a = split_down_projection(tensor(h), weights, config)
    ap_b, sem_b = split_down_projection(tensor(changed), weights, config)
    np.testing.assert_array_equal(ap_a.data, ap_b.data)
    assert not np.array_equal(sem_a.data, sem_b.data)


def max_hidden_difference(a, b):
    diff = 0.0
    for sa, sb in zip(a.hidden, b.hidden):
        diff = max(diff, float(np.max(np.abs(sa.x_sem.data - sb.x_sem.data))))
        if sa.x_ap is not None:
            diff = max(diff, float(np.max(np.abs(sa.x_ap.data - sb.x_ap.data))))
    return diff


@pytest.mark.parametrize("variant, invariant", [("rp", True), ("rope", True), ("ap", False), ("dstg", False)])
def test_global_position_shift(make_encoder, variant, invariant):
    encoder = make_encoder(variant)
    ids, special = doc_arrays()
    base = encoder.forward(ids, Positions.assign(10), special)
    shifted = encoder.forward(ids, Positions.assign(10, shift=9), special)
    diff = max_hidden_difference(base, shifted)
    if variant == "rp":
        assert diff == 0.0
    elif invariant:
        assert diff < 1e-4
    else:
        assert diff > 1e-3


@pytest.mark.parametrize("scope, reaches", [("semantic_only", False), ("full", True)])
def test_mlm_gradient_reaches_final_ap_only_in_full_scope(make_encoder, scope, reaches):
    encoder = make_encoder(mlm_scope=scope)
    ids, special = doc_arrays()
    labels = np.full(10, -100)
    labels[[2, 5, 7]] = ids[[2, 5, 7]]
    loss, trace = encoder.mlm_loss(ids, labels, Positions.assign(10), special)
    backward(loss)
    grad = trace.final.x_ap.grad
    if reaches:
        assert grad is not None and np.any(grad != 0)
    else:
        assert grad is None or not np.any(grad != 0)
    # the last block's AP value path is unused in semantic_only scope
    w_down_ap = encoder.params[f"layers.{encoder.config.layers - 1}.w_down_ap"].grad
    assert (w_down_ap is not None and np.any(w_down_ap != 0)) == reaches


def test_initialize_is_seeded(make_config):
    config = make_config()
    a, b, c = Encoder.initialize(config, 5), Encoder.initialize(config, 5), Encoder.initialize(config, 6)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["tok_emb"].data, c.params["tok_emb"].data)
    assert np.all(a.params["layers.0.rp_table"].data == 0)


@pytest.mark.parametrize("variant, scope", [("dstg", "semantic_only"), ("dstg", "full"), ("rope", "semantic_only")])
def test_encoder_gradients_match_finite_differences(make_config, variant, scope):
    ids, special = doc_arrays(n=8)
    labels = np.full(8, -100)
    labels[[1, 3, 6]] = ids[[1, 3, 6]]
    with precision():
        encoder = Encoder.initialize(make_config(variant, scope), seed=1)
        rng = np.random.default_rng(0)
        for name, p in encoder.params.items():
            if name.endswith("rp_table"):
                p.data[...] = rng.normal(scale=0.5, size=p.shape)
        positions = Positions.assign(8, shift=2)

        def loss_fn():
            return encoder.mlm_loss(ids, labels, positions, special)[0]

        report = check_gradients(loss_fn, encoder.params, coords=20, rng=np.random.default_rng(7))
    assert report.passed(1e-3), {k: v for k, v in report.worst.items() if v[0] >= 1e-3}


def test_parameter_count_matches_analytic_formula(make_encoder):
    encoder = make_encoder()
    c = encoder.config
    d = c.d_model
    per_layer = (
        2 * (c.d_sem + c.d_ap)                          # attention and ffn gains
        + 2 * d * d + c.d_sem ** 2 * 2 + c.d_ap ** 2 * 2  # q, k per stream; v, o per stream
        + c.heads * (c.num_buckets + 3)
        + 2 * d * 4 * d + 4 * c.d_sem * c.d_sem + 4 * c.d_ap * c.d_ap
    )
    expected = c.vocab_size * c.d_sem + c.max_positions * c.d_ap + c.layers * per_layer + c.d_sem + c.d_sem * c.vocab_size + c.vocab_size
    assert encoder.parameter_count() == expected


def test_zero_layers_return_embeddings(make_encoder):
    encoder = make_encoder(layers=0)
    ids, special = doc_arrays()
    trace = encoder.forward(ids, special_mask=special)
    assert len(trace.hidden) == 1
    np.testing.assert_array_equal(trace.final.x_sem.data, encoder.params["tok_emb"].data[ids])
    np.testing.assert_array_equal(trace.final.x_ap.data, encoder.params["ap_emb"].data[:10])


def test_identity_attention_does_not_mix_tokens(make_encoder, rng):
    encoder = make_encoder()
    config = encoder.config
    weights = encoder.layer_weights(0)
    n = 5
    x_ap, x_sem = rng.normal(size=(n, config.d_ap)), rng.normal(size=(n, config.d_sem))
    state = StreamState(x_ap=tensor(x_ap), x_sem=tensor(x_sem))
    out = attention_forward(state, weights, config, np.zeros(n, dtype=bool), probs_override=[np.eye(n)] * config.heads)

    def projected(x, norm, w_v, w_o):
        normed = x / np.sqrt(np.mean(x ** 2, axis=1, keepdims=True) + config.norm_eps) * weights[norm].data
        return x + normed @ weights[w_v].data @ weights[w_o].data

    np.testing.assert_allclose(out.x_sem.data, projected(x_sem, "attn_norm_sem", "wv_sem", "wo_sem"), rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(out.x_ap.data, projected(x_ap, "attn_norm_ap", "wv_ap", "wo_ap"), rtol=1e-4, atol=1e-6)


def test_dstg_without_ap_stream_equals_rp_variant(make_config, rng):
    rp = Encoder.initialize(make_config("rp"), seed=2)
    for name, p in rp.params.items():
        if name.endswith("rp_table"):
            p.data[...] = rng.normal(size=p.shape)
    empty = Encoder(ModelConfig(**{**rp.config.to_dict(), "variant": "dstg"}), rp.params)
    ids, special = doc_arrays()
    a = rp.forward(ids, special_mask=special)
    b = empty.forward(ids, special_mask=special)
    np.testing.assert_array_equal(a.final.x_sem.data, b.final.x_sem.data)


def test_semantic_loss_reaches_ap_parameters(make_encoder):
    encoder = make_encoder()
    ids, special = doc_arrays()
    labels = np.full(10, -100)
    labels[[3, 4]] = ids[[3, 4]]
    loss, _ = encoder.mlm_loss(ids, labels, Positions.assign(10), special)
    backward(loss)
    for name in ("ap_emb", "layers.0.w_down_ap", "layers.0.wv_ap", "layers.1.wq_ap"):
        assert np.any(encoder.params[name].grad != 0), name
