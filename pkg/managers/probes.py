#!/usr/bin/env python3
"""
Probe Manager - structural probes of hidden states

Three targets per token: normalised absolute position, segment id and
progress inside the segment. Each is regressed with ridge on frozen hidden
states of every layer and stream, evaluated by R² on held-out documents over
several seeded 80/20 document splits.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.metrics import r2_score

from common_utils import ordered_map, print_ok, print_step
from core.constants import BOUNDARY_TOKENS, PROBE_TARGETS
from core.errors import ProbeError, VariantError
from core.positional import Positions
from core.rng import stream as rng_stream
from managers.corpus import segment_labels

LAYER_ZERO_MODES = ("embeddings", "first_block")


# ============================================================================
# TARGETS
# ============================================================================

def target_token_ap(doc, positions, max_positions):
    """y_i = pos(t_i) / m"""
    ids = positions.ids if isinstance(positions, Positions) else np.asarray(positions)
    return ids.astype(np.float64) / float(max_positions)


def target_segment_ap(doc, segs):
    """Segment id as a real-valued target (specials keep the sentinel)"""
    return segs.segment_ids.astype(np.float64)


def target_intra_segment(doc, segs):
    """(index in segment) / (segment length - 1); singleton segments give 0"""
    return segs.intra.copy()


def target_rows(doc, segs, target):
    """Token rows a target is defined on: no specials, no singleton segments for progress"""
    rows = segs.valid.copy()
    if target == "intra_segment":
        rows &= ~segs.singleton
    return np.flatnonzero(rows)


# ============================================================================
# RIDGE + R²
# ============================================================================

def ridge_fit(X, y, lam):
    """
    Minimise ||y - Xw - b||² + lam ||w||² with an unpenalised intercept
    Parameters:
        X: matrix[n x d]
        y: vector[n] or matrix[n x k]
        lam: ridge strength (>= 0)
    Returns:
        (w, b)
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ProbeError(f"ridge_fit: X {X.shape} and y {y.shape} disagree on rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ProbeError("ridge_fit: non-finite inputs")
    if lam < 0:
        raise ProbeError(f"ridge_fit: lambda must be >= 0, got {lam}")
    x_mean = X.mean(axis=0)
    y_mean = y.mean(axis=0)
    Xc = X - x_mean
    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    rhs = Xc.T @ (y - y_mean)
    try:
        w = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError):
        w = scipy.linalg.lstsq(gram, rhs)[0]
    return w, y_mean - x_mean @ w


def ridge_predict(X, w, b):
    return np.asarray(X, dtype=np.float64) @ w + b


def r2(pred, y):
    """1 - SS_res / SS_tot"""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ProbeError(f"r2: prediction {pred.shape} and target {y.shape} differ")
    if y.size < 2 or np.all(y == y.flat[0]):
        raise ProbeError("r2: target is constant")
    return float(r2_score(y, pred))


# ============================================================================
# FEATURES
# ============================================================================

def probe_streams(config):
    """Streams probed for a model: AP / sem / concat for DSTG, the single stream otherwise"""
    if config.has_ap_stream:
        return ["ap", "sem", "concat"]
    return ["hidden"]


def stream_matrix(state, stream):
    """Numpy features of one StreamState"""
    if stream in ("sem", "hidden") and state.x_ap is None:
        return state.x_sem.data
    if stream == "sem":
        return state.x_sem.data
    if state.x_ap is None:
        raise VariantError(f"stream '{stream}' needs an AP stream")
    if stream == "ap":
        return state.x_ap.data
    return np.concatenate([state.x_ap.data, state.x_sem.data], axis=1)


def probe_layers(config, layer_zero="embeddings"):
    """(row label, hidden-state index) pairs; hidden[0] are the embeddings"""
    if layer_zero not in LAYER_ZERO_MODES:
        raise ProbeError(f"probe_layer_zero must be one of {LAYER_ZERO_MODES}, got '{layer_zero}'")
    offset = 0 if layer_zero == "embeddings" else 1
    return [(row, row + offset) for row in range(config.layers + 1 - offset)]


def layer_excluded(config, hidden_index, stream, probe_unused_ap_layer=False):
    """The last AP state of a semantic_only DSTG model never receives gradient"""
    return (
        config.has_ap_stream
        and config.mlm_scope == "semantic_only"
        and hidden_index == config.layers
        and stream in ("ap", "concat")
        and not probe_unused_ap_layer
    )


@dataclass
class DocFeatures:
    """Hidden features and targets of one document, non-special rows only"""

    features: dict      # (hidden index, stream) -> matrix
    targets: dict       # target -> (token rows, y)
    valid_index: np.ndarray  # token index of every feature row


def document_features(encoder, doc, targets=PROBE_TARGETS, boundary_tokens=BOUNDARY_TOKENS):
    """Forward one document at evaluation positions (k = 0) and collect every stream"""
    config = encoder.config
    positions = Positions.assign(len(doc))
    trace = encoder.forward(doc.ids, positions, doc.special_mask)
    segs = segment_labels(doc, boundary_tokens)
    builders = {
        "token_ap": lambda: target_token_ap(doc, positions, config.max_positions),
        "segment_ap": lambda: target_segment_ap(doc, segs),
        "intra_segment": lambda: target_intra_segment(doc, segs),
    }
    out_targets = {}
    for target in targets:
        rows = target_rows(doc, segs, target)
        out_targets[target] = (rows, builders[target]()[rows])
    features = {}
    valid = np.flatnonzero(segs.valid)
    for index, state in enumerate(trace.hidden):
        for stream in probe_streams(config):
            features[(index, stream)] = np.asarray(stream_matrix(state, stream), dtype=np.float64)[valid]
    return DocFeatures(features=features, targets=out_targets, valid_index=valid)


def hidden_features(encoder, docs, hidden_index, stream):
    """Stacked non-special features of all documents (inter-model regression)"""
    def _one(doc):
        trace = encoder.forward(doc.ids, Positions.assign(len(doc)), doc.special_mask)
        return np.asarray(stream_matrix(trace.hidden[hidden_index], stream), dtype=np.float64)[~doc.special_mask]

    return np.concatenate(ordered_map(_one, docs), axis=0)


# ============================================================================
# PROBE REPORTS
# ============================================================================

@dataclass
class ProbeCell:
    layer: int
    stream: str
    r2_mean: float = float("nan")
    r2_std: float = float("nan")
    n_train_docs: int = 0
    n_test_docs: int = 0
    lam: float = 1.0
    seeds: int = 0
    scores: list = field(default_factory=list)
    absent: bool = False


@dataclass
class ProbeReport:
    """R² per layer and stream for one model and one target"""

    label: str
    variant: str
    target: str
    mlm_scope: str
    cells: list = field(default_factory=list)

    def cell(self, layer, stream):
        for c in self.cells:
            if c.layer == layer and c.stream == stream:
                return c
        return None

    def present(self):
        return [c for c in self.cells if not c.absent]


def split_documents(n_docs, seed, test_fraction=0.2):
    """Seeded document-level split; returns (train indices, test indices)"""
    if n_docs < 2:
        raise ProbeError(f"need at least 2 documents to split, got {n_docs}")
    order = rng_stream(seed, "probe-split").permutation(n_docs)
    n_test = min(n_docs - 1, max(1, int(round(test_fraction * n_docs))))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def probe_dataset(doc_features, doc_indices, key, target):
    """Stack features and targets of the given documents"""
    X, y = [], []
    for i in doc_indices:
        feats = doc_features[i]
        rows, values = feats.targets[target]
        X.append(feats.features[key][np.searchsorted(feats.valid_index, rows)])
        y.append(values)
    return np.concatenate(X, axis=0), np.concatenate(y, axis=0)


def fit_cell(doc_features, key, target, lam, seeds, test_fraction=0.2):
    """Mean and std of held-out R² over seeded document splits"""
    def _score(seed):
        train, test = split_documents(len(doc_features), seed, test_fraction)
        X_train, y_train = probe_dataset(doc_features, train, key, target)
        X_test, y_test = probe_dataset(doc_features, test, key, target)
        w, b = ridge_fit(X_train, y_train, lam)
        return r2(ridge_predict(X_test, w, b), y_test), len(train), len(test)

    results = ordered_map(_score, range(seeds))
    scores = [r for r, _, _ in results]
    return float(np.mean(scores)), float(np.std(scores)), results[0][1], results[0][2], scores


def collect_features(encoder, docs, targets=PROBE_TARGETS, boundary_tokens=BOUNDARY_TOKENS):
    """Per-document features, in document order"""
    return ordered_map(lambda doc: document_features(encoder, doc, targets, boundary_tokens), docs)


def run_probe(encoder, docs, target, lam=1.0, seeds=5, layer_zero="embeddings", probe_unused_ap_layer=False,
              boundary_tokens=BOUNDARY_TOKENS, label=None, doc_features=None):
    """
    Probe every layer and stream of one model for one target
    Returns:
        ProbeReport
    """
    if target not in PROBE_TARGETS:
        raise ProbeError(f"unknown probe target '{target}' (expected one of {', '.join(PROBE_TARGETS)})")
    config = encoder.config
    doc_features = doc_features or collect_features(encoder, docs, (target,), boundary_tokens)
    report = ProbeReport(label=label or checkpoint_label(config), variant=config.variant, target=target, mlm_scope=config.mlm_scope)
    for row, hidden_index in probe_layers(config, layer_zero):
        for stream in probe_streams(config):
            cell = ProbeCell(layer=row, stream=stream, lam=lam, seeds=seeds)
            if layer_excluded(config, hidden_index, stream, probe_unused_ap_layer):
                cell.absent = True
            else:
                cell.r2_mean, cell.r2_std, cell.n_train_docs, cell.n_test_docs, cell.scores = fit_cell(
                    doc_features, (hidden_index, stream), target, lam, seeds)
            report.cells.append(cell)
    return report


def checkpoint_label(config):
    """File label of a model: its variant, plus _full for full-scope DSTG"""
    if config.variant == "dstg" and config.mlm_scope == "full":
        return "dstg_full"
    return config.variant


def check_tokenization(checkpoints):
    """Every checkpoint must share vocabulary and max_len"""
    keys = {(c.tokenizer.get("vocab_sha256"), c.tokenizer.get("max_len")) for c in checkpoints}
    if len(keys) > 1:
        raise ProbeError(f"checkpoints disagree on tokenization (vocab sha256, max_len): {sorted(map(str, keys))}")


@dataclass
class ProbeSuite:
    reports: list = field(default_factory=list)
    scope_comparison: dict = field(default_factory=dict)  # target -> rows


def compare_mlm_scope(semantic_report, full_report):
    """Rows (layer, stream, r2 semantic_only, r2 full) for cells both models have"""
    rows = []
    for cell in full_report.cells:
        other = semantic_report.cell(cell.layer, cell.stream)
        if other is None:
            continue
        rows.append((cell.layer, cell.stream, other.r2_mean, cell.r2_mean))
    return rows


def run_probe_suite(checkpoints, docs, targets=PROBE_TARGETS, lam=1.0, seeds=5, layer_zero="embeddings",
                    probe_unused_ap_layer=False, boundary_tokens=BOUNDARY_TOKENS):
    """
    Probe every checkpoint for every target
    When both a semantic_only and a full-scope DSTG checkpoint are present
    the MLM-scope comparison is added; the semantic_only model is probed on
    its unused last AP layer too for that comparison.
    Parameters:
        checkpoints: list of Checkpoint sharing tokenizer and max_len
        docs: analysis documents
    Returns:
        ProbeSuite
    """
    if not checkpoints:
        raise ProbeError("run_probe_suite needs at least one checkpoint")
    check_tokenization(checkpoints)
    labels = [checkpoint_label(c.model_config) for c in checkpoints]
    if len(set(labels)) != len(labels):
        raise ProbeError(f"duplicate model labels: {labels}")

    suite = ProbeSuite()
    by_label = {}
    for label, ckpt in zip(labels, checkpoints):
        print_step(f"🔎 Probing {label} on {len(docs)} documents")
        feats = collect_features(ckpt.encoder, docs, tuple(targets), boundary_tokens)
        for target in targets:
            report = run_probe(ckpt.encoder, docs, target, lam, seeds, layer_zero, probe_unused_ap_layer,
                               boundary_tokens, label, doc_features=feats)
            suite.reports.append(report)
            by_label[(label, target)] = (ckpt, feats)
        print_ok(f"{label}: {len(targets)} target(s)")

    if "dstg" in labels and "dstg_full" in labels:
        for target in targets:
            semantic_ckpt, semantic_feats = by_label[("dstg", target)]
            full_ckpt, full_feats = by_label[("dstg_full", target)]
            semantic = run_probe(semantic_ckpt.encoder, docs, target, lam, seeds, layer_zero, True,
                                 boundary_tokens, "dstg", doc_features=semantic_feats)
            full = run_probe(full_ckpt.encoder, docs, target, lam, seeds, layer_zero, True,
                             boundary_tokens, "dstg_full", doc_features=full_feats)
            suite.scope_comparison[target] = compare_mlm_scope(semantic, full)
    return suite


def probe_table(reports, target):
    """
    Side-by-side layout of several models for one target
    Returns:
        (header, rows) with one "label:stream" column per model stream, "mean±std" cells
    """
    chosen = [r for r in reports if r.target == target]
    columns = [(r, s) for r in chosen for s in dict.fromkeys(c.stream for c in r.cells)]
    header = ["layer"] + [f"{r.label}:{s}" for r, s in columns]
    layers = sorted({c.layer for r in chosen for c in r.cells})
    rows = []
    for layer in layers:
        row = [layer]
        for r, s in columns:
            cell = r.cell(layer, s)
            row.append("" if cell is None or cell.absent else f"{cell.r2_mean:.4f}±{cell.r2_std:.4f}")
        rows.append(row)
    return header, rows
