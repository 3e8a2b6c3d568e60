#!/usr/bin/env python3
"""
Training Manager - MLM masking, warmup/cosine schedule, AdamW and the training loop
"""

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from tqdm import tqdm

from common_utils import print_ok, print_step
from core.constants import IGNORE_INDEX
from core.errors import ConfigError, CorpusError, NumericsError, ShapeError
from core.model import Encoder
from core.numerics import backward, grad_or_zeros, scale
from core.positional import Positions, sample_ap_shift
from core.rng import stream
from core.state import is_quiet


# ============================================================================
# CONFIG + STATE
# ============================================================================

@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings; defaults are the desk values"""

    steps: int = 300
    batch_size: int = 8
    peak_lr: float = 3e-4
    warmup: int = 30
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_rate: float = 0.15
    mask_split: tuple = (0.8, 0.1, 0.1)
    ap_shift: bool = True
    isolation_check_every: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask_split", tuple(float(x) for x in self.mask_split))
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"steps must be >= 0 and batch_size >= 1 (got {self.steps}, {self.batch_size})")
        if not 0 <= self.warmup <= max(self.steps, 0):
            raise ConfigError(f"warmup ({self.warmup}) must lie in [0, steps={self.steps}]")
        if not 0.0 < self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1], got {self.mask_rate}")
        if len(self.mask_split) != 3 or min(self.mask_split) < 0 or abs(sum(self.mask_split) - 1.0) > 1e-9:
            raise ConfigError(f"mask_split must be three non-negative fractions summing to 1, got {self.mask_split}")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError("peak_lr and weight_decay must be non-negative")

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self):
        values = asdict(self)
        values["mask_split"] = list(self.mask_split)
        return values


@dataclass
class AdamState:
    """First/second moments per parameter name plus the update count"""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


@dataclass
class Checkpoint:
    """Everything needed to resume or analyse a run"""

    encoder: Encoder
    train_config: TrainConfig
    moments: AdamState
    step: int = 0
    tokenizer: dict = field(default_factory=dict)

    @property
    def model_config(self):
        return self.encoder.config

    @property
    def variant(self):
        return self.encoder.config.variant


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)  # (step, lr, loss)


# ============================================================================
# MASKING
# ============================================================================

def mask_tokens(doc, rng, config, vocab):
    """
    Corrupt a document for MLM
    A fraction mask_rate of the non-special positions is selected; selected
    tokens become [MASK], a random non-special id, or stay unchanged
    according to mask_split.
    Parameters:
        doc: Document
        rng: numpy Generator
        config: TrainConfig (mask_rate, mask_split)
        vocab: Vocab
    Returns:
        (corrupted ids, labels) with IGNORE_INDEX at unselected positions
    """
    maskable = np.flatnonzero(~doc.special_mask)
    if maskable.size == 0:
        raise CorpusError("document has no maskable tokens")
    count = min(maskable.size, max(1, int(round(config.mask_rate * maskable.size))))
    selected = np.sort(rng.choice(maskable, size=count, replace=False))

    ids = np.array(doc.ids, dtype=np.int64)
    labels = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    labels[selected] = ids[selected]

    p_mask, p_random, _ = config.mask_split
    action = rng.random(count)
    to_mask = selected[action < p_mask]
    to_random = selected[(action >= p_mask) & (action < p_mask + p_random)]
    ids[to_mask] = vocab.mask_id
    if to_random.size:
        regular = np.setdiff1d(np.arange(len(vocab)), sorted(vocab.special_ids))
        ids[to_random] = rng.choice(regular, size=to_random.size)
    return ids, labels


# ============================================================================
# SCHEDULE + OPTIMIZER
# ============================================================================

def lr_at(step, config):
    """Linear warmup from 0 to peak_lr, then cosine decay to 0 at the final step"""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step < config.warmup:
        return config.peak_lr * step / config.warmup
    progress = min((step - config.warmup) / max(config.steps - config.warmup, 1), 1.0)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name, param):
    """Weight decay applies to matrices, never to gains, biases or RP tables"""
    return param.ndim >= 2 and not name.endswith("rp_table")


def adamw_step(params, grads, moments, lr, config):
    """
    One AdamW update with decoupled weight decay, in place
    Parameters:
        params: dict name -> Tensor
        grads: dict name -> array (missing = zero gradient)
        moments: AdamState, advanced by one step
        lr: learning rate of this step
        config: TrainConfig (betas, eps, weight_decay)
    Returns:
        params
    """
    b1, b2 = config.beta1, config.beta2
    moments.t += 1
    bias1 = 1.0 - b1 ** moments.t
    bias2 = 1.0 - b2 ** moments.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = moments.m.setdefault(name, np.zeros_like(p.data))
        v = moments.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay and decays(name, p):
            p.data *= p.data.dtype.type(1.0 - lr * config.weight_decay)
        p.data -= (lr * (m / bias1) / (np.sqrt(v / bias2) + config.adam_eps)).astype(p.data.dtype)
    return params


# ============================================================================
# TRAINING LOOP
# ============================================================================

def document_positions(doc, encoder, config, rng):
    """Shifted positions for variants with a position table, k = 0 otherwise"""
    n = len(doc)
    if config.ap_shift and encoder.config.has_position_table:
        return Positions.assign(n, sample_ap_shift(n, encoder.config.max_positions, rng))
    return Positions.assign(n)


def final_ap_gradient(trace):
    """Gradient reaching the last AP hidden state (zeros when none flows there)"""
    if trace.final.x_ap is None:
        return None
    return grad_or_zeros(trace.final.x_ap)


def batch_loss(encoder, docs, step, config, vocab):
    """
    Forward and backward over one batch; gradients accumulate on the parameters
    Returns:
        (mean loss, traces)
    """
    rng = stream(config.seed, "batch", step)
    picks = rng.choice(len(docs), size=min(config.batch_size, len(docs)), replace=False)
    total = 0.0
    traces = []
    for slot, doc_index in enumerate(picks):
        doc = docs[int(doc_index)]
        positions = document_positions(doc, encoder, config, stream(config.seed, "shift", step, slot))
        ids, labels = mask_tokens(doc, stream(config.seed, "mask", step, slot), config, vocab)
        loss, trace = encoder.mlm_loss(ids, labels, positions, doc.special_mask)
        backward(scale(loss, 1.0 / len(picks)))
        total += loss.item()
        traces.append(trace)
    return total / len(picks), traces


def check_isolation(encoder, traces, step):
    """In semantic_only scope no gradient may reach the last AP hidden state"""
    config = encoder.config
    if not config.has_ap_stream or config.mlm_scope != "semantic_only":
        return
    for trace in traces:
        grad = final_ap_gradient(trace)
        if np.any(grad != 0):
            raise NumericsError(f"step {step}: gradient reached the final AP stream in semantic_only scope")


def train(model_config, train_config, docs, vocab, resume=None, stop_at=None, max_len=None):
    """
    Deterministic MLM training
    Parameters:
        model_config: ModelConfig (ignored when resuming)
        train_config: TrainConfig
        docs: list of Document
        vocab: Vocab
        resume: Checkpoint to continue from
        stop_at: last step to run (default train_config.steps)
        max_len: recorded in the checkpoint's tokenizer block
    Returns:
        TrainResult whose checkpoint holds the final weights and moments
    """
    if not docs:
        raise CorpusError("cannot train on an empty corpus")
    if resume is not None:
        encoder, moments, start = resume.encoder, resume.moments, resume.step
    else:
        if model_config.vocab_size != len(vocab):
            raise ConfigError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
        encoder = Encoder.initialize(model_config, train_config.seed)
        moments = AdamState.zeros_like(encoder.params)
        start = 0
    stop = train_config.steps if stop_at is None else min(stop_at, train_config.steps)

    print_step(f"🚀 Training {encoder.config.variant} for steps {start + 1}..{stop} "
               f"({encoder.parameter_count()} parameters, {len(docs)} documents)")
    losses = []
    progress = tqdm(range(start + 1, stop + 1), desc="train", unit="step", disable=is_quiet(), leave=False)
    for step in progress:
        lr = lr_at(step, train_config)
        encoder.zero_grad()
        loss, traces = batch_loss(encoder, docs, step, train_config, vocab)
        every = train_config.isolation_check_every
        if every and step % every == 0:
            check_isolation(encoder, traces, step)
        grads = {name: grad_or_zeros(p) for name, p in encoder.params.items()}
        adamw_step(encoder.params, grads, moments, lr, train_config)
        losses.append((step, lr, loss))
        progress.set_postfix(loss=f"{loss:.4f}", lr=f"{lr:.2e}")
    encoder.zero_grad()

    tokenizer = dict(resume.tokenizer) if resume is not None else {
        "vocab_sha256": vocab.sha256,
        "vocab_size": len(vocab),
        "max_len": int(max_len if max_len is not None else max(len(d) for d in docs)),
    }
    checkpoint = Checkpoint(encoder=encoder, train_config=train_config, moments=moments, step=max(stop, start), tokenizer=tokenizer)
    if losses:
        print_ok(f"Step {losses[-1][0]}: loss {losses[-1][2]:.4f}")
    return TrainResult(checkpoint=checkpoint, losses=losses)
