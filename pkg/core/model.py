#!/usr/bin/env python3
"""
Encoder variants: the disentangled DSTG encoder and its AP / RP / RoPE baselines

Row-vector convention throughout: a stream is Tensor[n x d] and a projection
is x @ W with W[d_in x d_out]. Each layer runs, per stream,
RMSNorm -> attention -> residual -> RMSNorm -> SwiGLU -> residual.
The AP and semantic streams share attention probabilities and meet only in
the SwiGLU gate/up projections.
"""

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from core.constants import IGNORE_INDEX, MLM_SCOPES, VARIANTS
from core.errors import ConfigError, PositionError, ShapeError
from core.numerics import (
    add,
    concat_cols,
    cross_entropy,
    gather_rows,
    matmul,
    mul,
    parameter,
    rmsnorm,
    scale,
    slice_cols,
    softmax_rows,
    swish,
    tensor,
    transpose,
)
from core.positional import APEmbedding, Positions, RPBiasTable, ap_lookup, apply_rope
from core.rng import stream


# ============================================================================
# CONFIG
# ============================================================================

@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk DSTG encoder"""

    variant: str = "dstg"
    layers: int = 2
    heads: int = 4
    d_ap: int = 8
    d_sem: int = 56
    max_positions: int = 128
    vocab_size: int = 2000
    mlm_scope: str = "semantic_only"
    num_buckets: int = 32
    max_distance: int = 128
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (expected one of {', '.join(VARIANTS)})")
        if self.mlm_scope not in MLM_SCOPES:
            raise ConfigError(f"unknown mlm_scope '{self.mlm_scope}' (expected one of {', '.join(MLM_SCOPES)})")
        if self.variant != "dstg" and self.d_ap != 0:
            raise ConfigError(f"variant '{self.variant}' has no AP stream: d_ap must be 0, got {self.d_ap}")
        if self.layers < 0 or self.heads < 1 or self.d_sem < 1 or self.d_ap < 0:
            raise ConfigError(f"invalid sizes: layers={self.layers} heads={self.heads} d_ap={self.d_ap} d_sem={self.d_sem}")
        if self.d_ap % self.heads or self.d_sem % self.heads:
            raise ConfigError(f"d_ap ({self.d_ap}) and d_sem ({self.d_sem}) must be multiples of heads ({self.heads})")
        if self.variant == "rope" and self.d_head % 2:
            raise ConfigError(f"RoPE needs an even head width, got d_head={self.d_head}")
        if self.max_positions < 2 or self.vocab_size < 2:
            raise ConfigError("max_positions and vocab_size must be at least 2")
        if self.num_buckets < 4:
            raise ConfigError(f"num_buckets must be at least 4, got {self.num_buckets}")
        if self.max_distance <= self.num_buckets // 4:
            raise ConfigError(f"max_distance ({self.max_distance}) must exceed num_buckets // 4 "
                              f"({self.num_buckets // 4})")

    @classmethod
    def for_variant(cls, variant, **overrides):
        """Config of a variant; baselines get d_ap = 0 so d_model = d_sem"""
        if variant != "dstg":
            overrides["d_ap"] = 0
        return cls(variant=variant, **overrides)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self):
        return asdict(self)

    @property
    def d_model(self):
        return self.d_ap + self.d_sem

    @property
    def d_head(self):
        return self.d_model // self.heads

    @property
    def d_int_ap(self):
        return 4 * self.d_ap

    @property
    def d_int_sem(self):
        return 4 * self.d_sem

    @property
    def has_ap_stream(self):
        return self.d_ap > 0

    @property
    def uses_rp_bias(self):
        return self.variant in ("dstg", "rp")

    @property
    def has_position_table(self):
        return self.has_ap_stream or self.variant == "ap"


def param_specs(config):
    """
    Ordered (name, shape, init) triples of every parameter
    init is one of "normal", "zeros", "ones"
    """
    c = config
    specs = [("tok_emb", (c.vocab_size, c.d_sem), "normal")]
    if c.has_ap_stream:
        specs.append(("ap_emb", (c.max_positions, c.d_ap), "normal"))
    if c.variant == "ap":
        specs.append(("pos_emb", (c.max_positions, c.d_sem), "normal"))
    for layer in range(c.layers):
        p = f"layers.{layer}."
        specs.append((p + "attn_norm_sem", (c.d_sem,), "ones"))
        specs += [(p + name, (c.d_sem, c.d_model), "normal") for name in ("wq_sem", "wk_sem")]
        specs += [(p + name, (c.d_sem, c.d_sem), "normal") for name in ("wv_sem", "wo_sem")]
        if c.has_ap_stream:
            specs.append((p + "attn_norm_ap", (c.d_ap,), "ones"))
            specs += [(p + name, (c.d_ap, c.d_model), "normal") for name in ("wq_ap", "wk_ap")]
            specs += [(p + name, (c.d_ap, c.d_ap), "normal") for name in ("wv_ap", "wo_ap")]
        if c.uses_rp_bias:
            specs.append((p + "rp_table", (c.heads, c.num_buckets + 3), "zeros"))
        specs.append((p + "ffn_norm_sem", (c.d_sem,), "ones"))
        if c.has_ap_stream:
            specs.append((p + "ffn_norm_ap", (c.d_ap,), "ones"))
        d_int = c.d_int_ap + c.d_int_sem
        specs += [(p + name, (c.d_model, d_int), "normal") for name in ("w_gate", "w_up")]
        specs.append((p + "w_down_sem", (c.d_int_sem, c.d_sem), "normal"))
        if c.has_ap_stream:
            specs.append((p + "w_down_ap", (c.d_int_ap, c.d_ap), "normal"))
    specs.append(("final_norm_sem", (c.d_sem,), "ones"))
    full_head = c.mlm_scope == "full" and c.has_ap_stream
    if full_head:
        specs.append(("final_norm_ap", (c.d_ap,), "ones"))
    specs.append(("mlm_head", (c.d_model if full_head else c.d_sem, c.vocab_size), "normal"))
    specs.append(("mlm_bias", (c.vocab_size,), "zeros"))
    return specs


# ============================================================================
# STATE TYPES
# ============================================================================

@dataclass
class StreamState:
    """Per-token AP and semantic streams; x_ap is None without an AP stream"""

    x_ap: object
    x_sem: object

    def __post_init__(self):
        if self.x_ap is not None and self.x_ap.shape[0] != self.x_sem.shape[0]:
            raise ShapeError(f"stream lengths differ: AP {self.x_ap.shape} vs sem {self.x_sem.shape}")

    @property
    def n(self):
        return self.x_sem.shape[0]


@dataclass
class AttentionWeights:
    """
    One head's attention components
    w_ap is the raw AP matrix; ap_mask marks the pairs where it enters l
    """

    w_sem: object
    w_ap: object = None
    b: object = None
    ap_mask: np.ndarray = None
    l: object = None
    probs: object = None


@dataclass
class EncoderTrace:
    """hidden[0] are the embeddings, hidden[l + 1] the output of block l"""

    hidden: list = field(default_factory=list)
    attention: list = field(default_factory=list)

    @property
    def final(self):
        return self.hidden[-1]


# ============================================================================
# BLOCKS
# ============================================================================

def _head_cols(head, width):
    return head * width, (head + 1) * width


def special_pair_mask(special_mask):
    """1 where neither the query nor the key is a special token"""
    regular = ~np.asarray(special_mask, dtype=bool)
    return (regular[:, None] & regular[None, :]).astype(np.float64)


def attention_logits(x_sem, x_ap, weights, config, special_mask, head, positions=None, rp_table=None, key_mask=None):
    """
    Logits and probabilities of one head
    Parameters:
        x_sem, x_ap: streams already passed through their own RMSNorms (x_ap may be None)
        weights: dict of this layer's parameters (short names)
        config: ModelConfig
        special_mask: boolean per token, True for [CLS]/[SEP]
        head: head index
        positions: Positions (RoPE rotates by them; RP uses only sequence offsets)
        rp_table: RPBiasTable of the layer when the variant uses the RP bias
    Returns:
        AttentionWeights with l = b + w_sem + w_ap * 1[i, j not special]
    """
    if x_sem.shape[1] != config.d_sem or (config.has_ap_stream and (x_ap is None or x_ap.shape[1] != config.d_ap)):
        raise ConfigError(f"stream widths do not match config (d_ap={config.d_ap}, d_sem={config.d_sem})")
    n = x_sem.shape[0]
    start, stop = _head_cols(head, config.d_head)
    inv_sqrt = 1.0 / math.sqrt(config.d_head)

    q_sem = matmul(x_sem, slice_cols(weights["wq_sem"], start, stop))
    k_sem = matmul(x_sem, slice_cols(weights["wk_sem"], start, stop))
    if config.variant == "rope":
        ids = positions.ids if positions is not None else np.arange(n)
        q_sem = apply_rope(q_sem, ids, config.rope_base)
        k_sem = apply_rope(k_sem, ids, config.rope_base)
    w_sem = scale(matmul(q_sem, transpose(k_sem)), inv_sqrt)
    out = AttentionWeights(w_sem=w_sem)

    logits = w_sem
    if config.uses_rp_bias:
        out.b = rp_table.bias(head, special_mask)
        logits = add(out.b, w_sem)
    if config.has_ap_stream:
        q_ap = matmul(x_ap, slice_cols(weights["wq_ap"], start, stop))
        k_ap = matmul(x_ap, slice_cols(weights["wk_ap"], start, stop))
        out.w_ap = scale(matmul(q_ap, transpose(k_ap)), inv_sqrt)
        out.ap_mask = special_pair_mask(special_mask)
        logits = add(logits, mul(out.w_ap, tensor(out.ap_mask)))
    out.l = logits
    out.probs = softmax_rows(logits, key_mask)
    return out


def _mix_values(x, w_v, w_o, probs, heads):
    """Apply per-head probabilities to per-head value slices, then the output projection"""
    width = w_v.shape[1] // heads
    outputs = []
    for head in range(heads):
        start, stop = _head_cols(head, width)
        values = matmul(x, slice_cols(w_v, start, stop))
        outputs.append(matmul(probs[head], values))
    return matmul(concat_cols(outputs), w_o)


def attention_forward(state, weights, config, special_mask, positions=None, rp_table=None, probs_override=None, capture=None):
    """
    Attention sub-block with residuals on both streams
    Parameters:
        state: StreamState entering the block
        probs_override: optional per-head probability matrices replacing the computed ones
        capture: optional list receiving each head's AttentionWeights
    Returns:
        StreamState after the residual additions
    """
    x_sem_n = rmsnorm(state.x_sem, weights["attn_norm_sem"], config.norm_eps)
    x_ap_n = rmsnorm(state.x_ap, weights["attn_norm_ap"], config.norm_eps) if config.has_ap_stream else None

    probs = []
    for head in range(config.heads):
        if probs_override is not None:
            probs.append(tensor(probs_override[head]))
            continue
        head_weights = attention_logits(x_sem_n, x_ap_n, weights, config, special_mask, head, positions, rp_table)
        if capture is not None:
            capture.append(head_weights)
        probs.append(head_weights.probs)

    x_sem = add(state.x_sem, _mix_values(x_sem_n, weights["wv_sem"], weights["wo_sem"], probs, config.heads))
    x_ap = None
    if config.has_ap_stream:
        x_ap = add(state.x_ap, _mix_values(x_ap_n, weights["wv_ap"], weights["wo_ap"], probs, config.heads))
    return StreamState(x_ap=x_ap, x_sem=x_sem)


def swiglu_hidden(state, weights, config):
    """h_inter = swish(x W_gate) * (x W_up) on the normalised concatenation [x_AP; x_sem]"""
    x = rmsnorm(state.x_sem, weights["ffn_norm_sem"], config.norm_eps)
    if config.has_ap_stream:
        x_ap = rmsnorm(state.x_ap, weights["ffn_norm_ap"], config.norm_eps)
        x = concat_cols([x_ap, x])
    return mul(swish(matmul(x, weights["w_gate"])), matmul(x, weights["w_up"]))


def split_down_projection(h_inter, weights, config):
    """Re-separate h_inter: the first 4*d_AP columns feed W_down^AP, the rest W_down^sem"""
    split = config.d_int_ap
    width = h_inter.shape[1]
    delta_sem = matmul(slice_cols(h_inter, split, width), weights["w_down_sem"])
    delta_ap = matmul(slice_cols(h_inter, 0, split), weights["w_down_ap"]) if config.has_ap_stream else None
    return delta_ap, delta_sem


def swiglu_forward(state, weights, config):
    """Split SwiGLU sub-block with residuals on both streams"""
    delta_ap, delta_sem = split_down_projection(swiglu_hidden(state, weights, config), weights, config)
    x_ap = add(state.x_ap, delta_ap) if config.has_ap_stream else None
    return StreamState(x_ap=x_ap, x_sem=add(state.x_sem, delta_sem))


# ============================================================================
# ENCODER
# ============================================================================

class Encoder:
    """Parameters of one encoder plus its forward pass"""

    def __init__(self, config, params):
        self.config = config
        self.params = params
        missing = [name for name, _, _ in param_specs(config) if name not in params]
        if missing:
            raise ConfigError(f"missing parameters: {', '.join(missing[:5])}")

    @classmethod
    def initialize(cls, config, seed=0):
        """N(0, init_std^2) projections and embeddings, zero biases/RP tables, unit gains"""
        rng = stream(seed, "init")
        params = {}
        for name, shape, init in param_specs(config):
            if init == "normal":
                data = rng.normal(0.0, config.init_std, size=shape)
            elif init == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = parameter(data, name=name)
        return cls(config, params)

    def layer_weights(self, layer):
        prefix = f"layers.{layer}."
        return {name[len(prefix):]: p for name, p in self.params.items() if name.startswith(prefix)}

    def rp_table(self, layer):
        if not self.config.uses_rp_bias:
            return None
        return RPBiasTable(self.params[f"layers.{layer}.rp_table"], self.config.num_buckets, self.config.max_distance)

    def ap_embedding(self):
        if self.config.has_ap_stream:
            return APEmbedding(self.params["ap_emb"])
        if self.config.variant == "ap":
            return APEmbedding(self.params["pos_emb"])
        return None

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def embed(self, ids, positions):
        """Layer-0 streams"""
        x_sem = gather_rows(self.params["tok_emb"], ids)
        x_ap = None
        if self.config.variant == "ap":
            x_sem = add(x_sem, ap_lookup(self.ap_embedding(), positions))
        if self.config.has_ap_stream:
            x_ap = ap_lookup(self.ap_embedding(), positions)
        return StreamState(x_ap=x_ap, x_sem=x_sem)

    def forward(self, ids, positions=None, special_mask=None, capture_attention=False):
        """
        Run every layer, keeping the state entering and leaving each block
        Parameters:
            ids: token ids of one document
            positions: Positions (default k = 0)
            special_mask: True for [CLS]/[SEP] (default none)
            capture_attention: record AttentionWeights per layer and head
        Returns:
            EncoderTrace
        """
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[0]
        if n > self.config.max_positions:
            raise PositionError(f"document length {n} exceeds maximum positions {self.config.max_positions}")
        positions = positions or Positions.assign(n)
        if len(positions) != n:
            raise ShapeError(f"{len(positions)} positions for {n} tokens")
        special_mask = np.zeros(n, dtype=bool) if special_mask is None else np.asarray(special_mask, dtype=bool)

        trace = EncoderTrace()
        state = self.embed(ids, positions)
        trace.hidden.append(state)
        for layer in range(self.config.layers):
            weights = self.layer_weights(layer)
            capture = [] if capture_attention else None
            state = attention_forward(state, weights, self.config, special_mask, positions, self.rp_table(layer), capture=capture)
            state = swiglu_forward(state, weights, self.config)
            trace.hidden.append(state)
            if capture_attention:
                trace.attention.append(capture)
        return trace

    def mlm_logits(self, final, rows=None):
        """
        Vocabulary logits from the last hidden state
        semantic_only reads x_sem alone; full reads [x_AP; x_sem]
        Parameters:
            final: StreamState of the last layer
            rows: optional token indices to decode (default all)
        """
        c = self.config
        h = rmsnorm(final.x_sem, self.params["final_norm_sem"], c.norm_eps)
        if c.mlm_scope == "full" and c.has_ap_stream:
            h_ap = rmsnorm(final.x_ap, self.params["final_norm_ap"], c.norm_eps)
            h = concat_cols([h_ap, h])
        if rows is not None:
            h = gather_rows(h, rows)
        return add(matmul(h, self.params["mlm_head"]), self.params["mlm_bias"])

    def mlm_loss(self, ids, labels, positions=None, special_mask=None, trace=None):
        """Mean cross entropy over labelled positions; returns (loss, trace)"""
        trace = trace or self.forward(ids, positions, special_mask)
        labels = np.asarray(labels, dtype=np.int64)
        rows = np.flatnonzero(labels != IGNORE_INDEX)
        logits = self.mlm_logits(trace.final, rows=rows)
        return cross_entropy(logits, labels[rows]), trace
