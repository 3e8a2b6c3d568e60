#!/usr/bin/env python3
"""
Dense tensors with reverse-mode automatic differentiation

Every op takes Tensors, computes its numpy result eagerly and, when any input
requires a gradient, records a backward rule on the output. Graph.from_output
walks those records into a topological order; backward() replays it in
reverse, summing each consumer's contribution into its inputs.

Only the broadcasting the encoder needs is supported: a row-vector bias added
to a matrix. Everything else must match shapes exactly.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from core.constants import IGNORE_INDEX
from core.errors import NumericsError, ShapeError
from core.state import get_accumulate_f64, get_compute_dtype


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode AD needs"""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=get_compute_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise NumericsError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, name=None):
    """Create a leaf tensor in the current compute dtype"""
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    """Create a trainable leaf tensor"""
    return Tensor(data, requires_grad=True, name=name)


def constant(value):
    """Wrap an array (or pass a Tensor through) without tracking gradients"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_op(data, parents, backward):
    """
    Build an op output and register its backward rule
    Parameters:
        data: forward result (numpy array)
        parents: input tensors, in the order backward returns gradients
        backward: callable(grad_out) -> tuple of gradients (None = no gradient)
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=get_compute_dtype())
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ============================================================================
# GRAPH + BACKWARD
# ============================================================================

@dataclass
class Graph:
    """Op records reachable from one output, inputs before consumers"""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, output):
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if n.requires_grad and n._backward is None]


def backward(loss, graph=None):
    """
    Reverse-mode pass from a scalar loss
    Parameters:
        loss: scalar Tensor
        graph: optional prebuilt Graph for loss
    Returns:
        dict mapping each trainable leaf (by name, or id when unnamed) to its gradient
    """
    if loss.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad_out = grads.get(id(node))
        if grad_out is None:
            continue
        if node._backward is None:
            node.grad = grad_out if node.grad is None else node.grad + grad_out
            continue
        node.grad = grad_out
        for parent, grad_in in zip(node._parents, node._backward(grad_out)):
            if grad_in is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grad_in if key not in grads else grads[key] + grad_in
    return {(leaf.name or id(leaf)): leaf.grad for leaf in graph.leaves()}


def grad_or_zeros(t):
    """Gradient of a tensor after backward, zeros if the loss never reached it"""
    return np.zeros_like(t.data) if t.grad is None else t.grad


# ============================================================================
# OPS
# ============================================================================

def _mm(a, b):
    if get_accumulate_f64():
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)
    return a @ b


def matmul(a, b):
    """c[i][j] = sum_t a[i][t] * b[t][j]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g):
        return _mm(g, b_data.T), _mm(a_data.T, g)

    return make_op(_mm(a_data, b_data), (a, b), _backward)


def add(a, b):
    """Elementwise sum; b may be a row vector broadcast over the rows of a"""
    b = constant(b)
    if a.shape == b.shape:
        return make_op(a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.size == a.shape[1] and b.ndim in (1, 2) and b.shape[0] in (1, a.shape[1]):
        row = b.data.reshape(1, -1)
        b_shape = b.shape
        return make_op(a.data + row, (a, b), lambda g: (g, g.sum(axis=0).reshape(b_shape)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a, b):
    """Elementwise product of equal-shape tensors"""
    b = constant(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    a_data, b_data = a.data, b.data
    return make_op(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a, factor):
    """Multiply by a python scalar"""
    factor = float(factor)
    return make_op(a.data * factor, (a,), lambda g: (g * factor,))


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return make_op(a.data.T, (a,), lambda g: (g.T,))


def slice_cols(a, start, stop):
    """Columns [start, stop) of a matrix"""
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def _backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_op(a.data[:, start:stop], (a,), _backward)


def concat_cols(parts):
    """Concatenate matrices side by side"""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def _backward(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return make_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), _backward)


def gather_rows(table, ids):
    """Rows of a matrix by integer id; gradients accumulate into the gathered rows"""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")
    shape = table.shape

    def _backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return make_op(table.data[ids], (table,), _backward)


def take(a, index):
    """Flat gather: out[...] = a.flat[index[...]]"""
    index = np.asarray(index, dtype=np.int64)
    flat = a.data.reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= flat.size):
        raise ShapeError(f"take index out of range for {a.size} elements")
    shape, size = a.shape, a.size

    def _backward(g):
        full = np.zeros(size, dtype=g.dtype)
        np.add.at(full, index.reshape(-1), g.reshape(-1))
        return (full.reshape(shape),)

    return make_op(flat[index], (a,), _backward)


def sum_all(a):
    shape = a.shape
    return make_op(np.sum(a.data).reshape(()), (a,), lambda g: (np.full(shape, g, dtype=g.dtype),))


# ============================================================================
# NEURAL OPS
# ============================================================================

def rmsnorm(x, gain, eps=1e-6):
    """
    y = gain * x / sqrt(mean(x^2) + eps) over the last axis
    Parameters:
        x: Tensor[d] or Tensor[n x d]
        gain: Tensor[d]
        eps: guards zero vectors
    """
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ShapeError(f"rmsnorm shape mismatch: x {x.shape}, gain {gain.shape}")
    if x.shape[-1] < 1:
        raise ShapeError("rmsnorm needs d >= 1")
    x_data, gain_data = x.data, gain.data
    inv = 1.0 / np.sqrt(np.mean(x_data * x_data, axis=-1, keepdims=True) + eps)
    x_hat = x_data * inv

    def _backward(g):
        g_hat = g * gain_data
        g_x = inv * (g_hat - x_hat * np.mean(g_hat * x_hat, axis=-1, keepdims=True))
        g_gain = (g * x_hat).reshape(-1, gain_data.shape[0]).sum(axis=0)
        return g_x, g_gain

    return make_op(x_hat * gain_data, (x, gain), _backward)


def swish(x):
    """x * sigmoid(x), elementwise"""
    x_data = x.data
    sig = expit(x_data)

    def _backward(g):
        return (g * sig * (1.0 + x_data * (1.0 - sig)),)

    return make_op(x_data * sig, (x,), _backward)


def softmax_rows(logits, key_mask=None):
    """
    Row-wise softmax over unmasked keys
    Parameters:
        logits: Tensor[n x m]
        key_mask: boolean row vector of length m (True = key visible), None = all visible
    Returns:
        Tensor[n x m]; masked keys get exactly 0
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {logits.shape}")
    if key_mask is None:
        probs = softmax(logits.data, axis=1)
    else:
        key_mask = np.asarray(key_mask, dtype=bool).reshape(-1)
        if key_mask.shape[0] != logits.shape[1]:
            raise ShapeError(f"key_mask length {key_mask.shape[0]} != {logits.shape[1]} keys")
        if not key_mask.any():
            raise NumericsError("softmax_rows: every key is masked")
        masked = np.where(key_mask[None, :], logits.data, -np.inf)
        probs = softmax(masked, axis=1)
        probs[:, ~key_mask] = 0.0

    def _backward(g):
        return (probs * (g - np.sum(g * probs, axis=1, keepdims=True)),)

    return make_op(probs, (logits,), _backward)


def cross_entropy(logits, labels, ignore_index=IGNORE_INDEX):
    """
    Mean negative log-softmax of the labelled class over non-ignored rows
    Parameters:
        logits: Tensor[n x V]
        labels: int sequence of length n; ignore_index marks skipped rows
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy shape mismatch: logits {logits.shape}, labels {labels.shape}")
    rows = np.flatnonzero(labels != ignore_index)
    if rows.size == 0:
        raise NumericsError("cross_entropy: every label is ignored")
    targets = labels[rows]
    vocab = logits.shape[1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise NumericsError(f"cross_entropy: labels must lie in [0, {vocab})")
    log_probs = log_softmax(logits.data[rows].astype(np.float64), axis=1)
    loss = -np.mean(log_probs[np.arange(rows.size), targets])
    shape = logits.shape

    def _backward(g):
        grad_rows = np.exp(log_probs)
        grad_rows[np.arange(rows.size), targets] -= 1.0
        full = np.zeros(shape, dtype=get_compute_dtype())
        full[rows] = grad_rows * (float(g) / rows.size)
        return (full,)

    return make_op(np.array(loss), (logits,), _backward)


# ============================================================================
# GRADIENT CHECK
# ============================================================================

@dataclass
class GradCheckReport:
    """Worst relative error per parameter group"""

    worst: dict = field(default_factory=dict)  # name -> (rel_err, flat_index, analytic, numeric)

    @property
    def max_rel_err(self):
        return max((entry[0] for entry in self.worst.values()), default=0.0)

    def passed(self, tol=1e-3):
        return self.max_rel_err < tol


def check_gradients(loss_fn, params, coords=50, step=1e-3, rng=None, floor=1e-6):
    """
    Compare analytic gradients with central finite differences
    Parameters:
        loss_fn: zero-argument callable building the scalar loss from params
        params: dict name -> Tensor
        coords: coordinates sampled per parameter group
        step: finite-difference step relative to the group's RMS scale
        rng: numpy Generator used to sample coordinates
        floor: denominator floor so near-zero gradients compare absolutely
    Returns:
        GradCheckReport
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {name: grad_or_zeros(p).reshape(-1).copy() for name, p in params.items()}

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if flat.size == 0:
            continue
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        h = step * max(float(np.sqrt(np.mean(flat.astype(np.float64) ** 2))), 1e-2)
        worst = (0.0, -1, 0.0, 0.0)
        for index in picks:
            original = flat[index]
            flat[index] = original + h
            f_plus = loss_fn().item()
            flat[index] = original - h
            f_minus = loss_fn().item()
            flat[index] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = float(analytic[name][index])
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if rel >= worst[0]:
                worst = (rel, int(index), exact, numeric)
        report.worst[name] = worst
    return report
