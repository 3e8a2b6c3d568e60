#!/usr/bin/env python3
"""
Analysis Manager - spectra of position tables, head taxonomy, attention maps,
hidden-state PCA and inter-model regression
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.special import log_softmax, rel_entr, softmax
from sklearn.decomposition import PCA

from common_utils import ordered_map
from core.constants import BOUNDARY_TOKENS, STREAMS
from core.errors import ConfigError, ProbeError, ShapeError, VariantError
from core.positional import Positions
from core.rng import stream as rng_stream
from managers.corpus import segment_labels, wrap_pieces
from managers.probes import hidden_features, r2, ridge_fit, ridge_predict, stream_matrix

HEAD_CATEGORIES = ("sem", "ap", "rp", "mixed")


def require_dstg(config, what):
    if config.variant != "dstg":
        raise VariantError(f"{what} requires a DSTG model, got variant '{config.variant}'")


# ============================================================================
# SPECTRUM
# ============================================================================

def dct_type2(signal):
    """X_k = sum_n x_n cos(pi (n + 1/2) k / m), unnormalised"""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or signal.size < 1:
        raise ShapeError(f"dct_type2 needs a non-empty vector, got shape {signal.shape}")
    # scipy's unnormalised type-II DCT carries a factor 2
    return dct(signal, type=2, norm=None) / 2.0


@dataclass
class SpectrumReport:
    """Explained variance per principal component and the DCT power of its position series"""

    variance_ratios: np.ndarray
    cumulative_variance: np.ndarray
    dct_power: np.ndarray       # [n_components x m] power shares
    lowfreq_share: np.ndarray   # power in bins [0, lowfreq_bins) per component
    total_variance: float
    n_positions: int
    lowfreq_bins: int = 4


def embedding_spectrum(E, lowfreq_bins=4):
    """
    PCA of a position table and the DCT-II spectrum of every component's series
    Parameters:
        E: matrix[m x d], one row per position
        lowfreq_bins: bins counted as low frequency
    Returns:
        SpectrumReport (zero variance, no crash, for a constant matrix)
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.size == 0:
        raise ShapeError(f"embedding_spectrum needs a non-empty matrix, got shape {E.shape}")
    m, d = E.shape
    k = min(m, d)
    centered = E - E.mean(axis=0, keepdims=True)
    total = float(np.sum(centered ** 2))
    if m < 2 or total <= np.finfo(np.float64).tiny:
        zeros = np.zeros(k)
        return SpectrumReport(zeros, zeros.copy(), np.zeros((k, m)), zeros.copy(), 0.0, m, lowfreq_bins)

    pca = PCA(n_components=k, svd_solver="full")
    scores = pca.fit_transform(E)
    power = np.zeros((k, m))
    lowfreq = np.zeros(k)
    for c in range(k):
        spectrum = dct_type2(scores[:, c]) ** 2
        energy = spectrum.sum()
        if energy > 0:
            power[c] = spectrum / energy
            lowfreq[c] = power[c, :lowfreq_bins].sum()
    ratios = pca.explained_variance_ratio_
    return SpectrumReport(
        variance_ratios=ratios,
        cumulative_variance=np.cumsum(ratios),
        dct_power=power,
        lowfreq_share=lowfreq,
        total_variance=total / (m - 1),
        n_positions=m,
        lowfreq_bins=lowfreq_bins,
    )


def position_table(encoder):
    """The learned position table of a checkpoint: DSTG AP table or AP-variant table"""
    embedding = encoder.ap_embedding()
    if embedding is None:
        raise VariantError(f"variant '{encoder.config.variant}' has no learned position table")
    return np.asarray(embedding.table.data, dtype=np.float64)


def load_matrix_csv(path):
    """Imported embedding matrix: m rows x d comma-separated columns, no header"""
    try:
        matrix = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read matrix CSV {path}: {e}") from e
    return matrix


# ============================================================================
# HEAD INFLUENCE
# ============================================================================

@dataclass
class HeadInfluence:
    """KL scores of removing the semantic / AP / RP logit component of one head"""

    layer: int
    head: int
    raw: np.ndarray
    normalized: np.ndarray
    n_docs: int = 0

    @property
    def category(self):
        return classify_head(self.normalized)


def kl_divergence(p, q):
    """D_KL(p || q) of two probability vectors (or row-wise over matrices)"""
    return np.sum(rel_entr(np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)), axis=-1)


def _row_kl(logits, ablated):
    """Row-wise D_KL(softmax(logits) || softmax(ablated)) from logits"""
    log_p = log_softmax(logits, axis=1)
    log_q = log_softmax(ablated, axis=1)
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=1)


def head_components(weights):
    """float64 logits and the three removable components of one head"""
    logits = np.asarray(weights.l.data, dtype=np.float64)
    n = logits.shape[0]
    w_sem = np.asarray(weights.w_sem.data, dtype=np.float64)
    w_ap = np.zeros((n, n)) if weights.w_ap is None else np.asarray(weights.w_ap.data, dtype=np.float64) * weights.ap_mask
    b = np.zeros((n, n)) if weights.b is None else np.asarray(weights.b.data, dtype=np.float64)
    return logits, {"sem": w_sem, "ap": w_ap, "rp": b}


def head_scores(weights, special_mask, include_special_rows=True):
    """Raw [sem, ap, rp] scores of one head on one document, averaged over query rows"""
    logits, components = head_components(weights)
    rows = np.ones(logits.shape[0], dtype=bool) if include_special_rows else ~np.asarray(special_mask, dtype=bool)
    scores = []
    for name in ("sem", "ap", "rp"):
        component = components[name]
        if not np.any(component):
            scores.append(0.0)
            continue
        kl = _row_kl(logits, logits - component)
        scores.append(float(np.mean(np.maximum(kl[rows], 0.0))))
    return np.array(scores)


def normalize_scores(raw):
    total = float(np.sum(raw))
    return raw / total if total > 0 else np.zeros_like(raw)


def classify_head(normalized, threshold=0.5):
    """Dominant component when its share reaches the threshold, else mixed"""
    if not np.any(normalized):
        return "mixed"
    best = int(np.argmax(normalized))
    return ("sem", "ap", "rp")[best] if normalized[best] >= threshold else "mixed"


def _document_scores(encoder, doc, layers, include_special_rows):
    trace = encoder.forward(doc.ids, Positions.assign(len(doc)), doc.special_mask, capture_attention=True)
    return {
        (layer, head): head_scores(trace.attention[layer][head], doc.special_mask, include_special_rows)
        for layer in layers
        for head in range(encoder.config.heads)
    }


def head_influence_table(encoder, docs, layers=None, include_special_rows=True):
    """
    HeadInfluence of every head of the given layers (default all)
    Per-document scores are merged in document order
    """
    require_dstg(encoder.config, "head_influence")
    if not docs:
        raise ConfigError("head_influence needs at least one document")
    layers = list(range(encoder.config.layers)) if layers is None else list(layers)
    for layer in layers:
        if not 0 <= layer < encoder.config.layers:
            raise ConfigError(f"layer {layer} outside [0, {encoder.config.layers})")
    per_doc = ordered_map(lambda doc: _document_scores(encoder, doc, layers, include_special_rows), docs)
    table = []
    for layer in layers:
        for head in range(encoder.config.heads):
            raw = np.zeros(3)
            for scores in per_doc:
                raw = raw + scores[(layer, head)]
            raw = raw / len(per_doc)
            table.append(HeadInfluence(layer, head, raw, normalize_scores(raw), len(per_doc)))
    return table


def head_influence(encoder, docs, layer, head, include_special_rows=True):
    """Influence vector of a single head"""
    if not 0 <= head < encoder.config.heads:
        raise ConfigError(f"head {head} outside [0, {encoder.config.heads})")
    for item in head_influence_table(encoder, docs, [layer], include_special_rows):
        if item.head == head:
            return item
    raise ConfigError(f"no influence row for layer {layer} head {head}")


def taxonomy_counts(influences, threshold=0.5):
    counts = dict.fromkeys(HEAD_CATEGORIES, 0)
    for item in influences:
        counts[classify_head(item.normalized, threshold)] += 1
    return counts


# ============================================================================
# ATTENTION MAPS
# ============================================================================

@dataclass
class AttentionMapSet:
    """
    Per head: softmax(w_sem), softmax(w_AP), softmax(b), softmax(l)
    The AP map masks special keys and leaves special query rows at zero;
    logits keeps the pre-softmax matrices of each component.
    """

    layer: int
    maps: list = field(default_factory=list)    # per head: component -> matrix
    logits: list = field(default_factory=list)  # per head: component -> matrix
    special_mask: np.ndarray = None


def _ap_map(w_ap, special_mask):
    n = w_ap.shape[0]
    regular = ~special_mask
    out = np.zeros((n, n))
    if regular.any():
        masked = np.where(regular[None, :], w_ap, -np.inf)
        out[regular] = softmax(masked[regular], axis=1)
    return out


def attention_maps(encoder, doc, layer):
    """The four per-head maps of one layer, from the same forward as the live model"""
    require_dstg(encoder.config, "attention_maps")
    if not 0 <= layer < encoder.config.layers:
        raise ConfigError(f"layer {layer} outside [0, {encoder.config.layers})")
    special_mask = np.asarray(doc.special_mask, dtype=bool)
    trace = encoder.forward(doc.ids, Positions.assign(len(doc)), special_mask, capture_attention=True)
    result = AttentionMapSet(layer=layer, special_mask=special_mask)
    n = len(doc)
    for weights in trace.attention[layer]:
        w_sem = np.asarray(weights.w_sem.data, dtype=np.float64)
        w_ap = np.zeros((n, n)) if weights.w_ap is None else np.asarray(weights.w_ap.data, dtype=np.float64)
        b = np.zeros((n, n)) if weights.b is None else np.asarray(weights.b.data, dtype=np.float64)
        result.logits.append({"sem": w_sem, "ap": w_ap, "rp": b, "combined": np.asarray(weights.l.data, dtype=np.float64)})
        result.maps.append({
            "sem": softmax(w_sem, axis=1),
            "ap": _ap_map(w_ap, special_mask),
            "rp": softmax(b, axis=1),
            "combined": weights.probs.data,
        })
    return result


def composite_document(docs, vocab, max_len):
    """DOC-A + DOC-B + DOC-A from the first two documents, truncated to fit max_len"""
    if len(docs) < 2:
        raise ConfigError("the ABA pattern needs at least two documents")
    a = list(zip(docs[0].tokens[1:-1], docs[0].offsets[1:-1]))
    b = list(zip(docs[1].tokens[1:-1], docs[1].offsets[1:-1]))
    width = (max_len - 2) // 3
    if width < 1:
        raise ConfigError(f"max_len {max_len} too small for the ABA pattern")
    pieces = a[:width] + b[:width] + a[:width]
    return wrap_pieces([(t, int(o[0]), int(o[1])) for t, o in pieces], vocab, source="ABA")


# ============================================================================
# HIDDEN PCA
# ============================================================================

@dataclass
class HiddenPCA:
    token_index: np.ndarray
    coords: np.ndarray
    segment_ids: np.ndarray
    variance_ratios: np.ndarray


def pca_2d(features):
    """Two leading principal coordinates and their variance ratios (zero-padded)"""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    k = min(2, n, d)
    coords = np.zeros((n, 2))
    ratios = np.zeros(2)
    if k >= 1 and np.any(features != features[0]):
        pca = PCA(n_components=k, svd_solver="full")
        coords[:, :k] = pca.fit_transform(features)
        ratios[:k] = pca.explained_variance_ratio_
    return coords, ratios


def hidden_pca(encoder, doc, layer, stream="ap", boundary_tokens=BOUNDARY_TOKENS, allow_unused_ap_layer=False):
    """
    2D PCA of one stream's hidden states for one document
    Parameters:
        layer: hidden-state index, 0 = embeddings, l = output of block l
        stream: ap, sem, concat or hidden
    """
    config = encoder.config
    if stream not in STREAMS:
        raise ConfigError(f"unknown stream '{stream}' (expected one of {', '.join(STREAMS)})")
    if stream in ("ap", "concat") and not config.has_ap_stream:
        raise VariantError(f"stream '{stream}' needs a DSTG model with an AP stream")
    if not 0 <= layer <= config.layers:
        raise ConfigError(f"layer {layer} outside [0, {config.layers}]")
    if (stream in ("ap", "concat") and layer == config.layers and config.mlm_scope == "semantic_only"
            and not allow_unused_ap_layer):
        raise ConfigError(f"layer {layer} AP states receive no gradient in semantic_only scope and are not analysed")
    trace = encoder.forward(doc.ids, Positions.assign(len(doc)), doc.special_mask)
    segs = segment_labels(doc, boundary_tokens)
    rows = np.flatnonzero(segs.valid)
    features = np.asarray(stream_matrix(trace.hidden[layer], stream), dtype=np.float64)[rows]
    coords, ratios = pca_2d(features)
    return HiddenPCA(token_index=rows, coords=coords, segment_ids=segs.segment_ids[rows], variance_ratios=ratios)


# ============================================================================
# INTER-MODEL REGRESSION
# ============================================================================

def inter_model_regression(src_hidden, dst_hidden, lam=1.0, test_fraction=0.2, seed=0):
    """
    Ridge map src -> dst, R² averaged over target dimensions on held-out tokens
    Target dimensions that are constant on the held-out tokens are skipped
    """
    src = np.asarray(src_hidden, dtype=np.float64)
    dst = np.asarray(dst_hidden, dtype=np.float64)
    if src.shape[0] != dst.shape[0]:
        raise ProbeError(f"token counts differ: {src.shape[0]} source vs {dst.shape[0]} target rows")
    n = src.shape[0]
    if n < 5:
        raise ProbeError(f"need at least 5 tokens, got {n}")
    order = rng_stream(seed, "intermodel").permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    test, train = np.sort(order[:n_test]), np.sort(order[n_test:])
    w, b = ridge_fit(src[train], dst[train], lam)
    pred = ridge_predict(src[test], w, b)
    scores = [r2(pred[:, j], dst[test, j]) for j in range(dst.shape[1]) if np.ptp(dst[test, j]) > 0]
    if not scores:
        raise ProbeError("every target dimension is constant on the held-out tokens")
    return float(np.mean(scores))


def intermodel_suite(dstg_encoder, baselines, docs, lam=1.0, seed=0):
    """
    Regress each baseline's hidden states onto the DSTG AP and semantic streams
    Parameters:
        dstg_encoder: Encoder with an AP stream
        baselines: list of (label, Encoder)
    Returns:
        rows (variant, layer, target_stream, r2)
    """
    require_dstg(dstg_encoder.config, "inter-model regression")
    if not dstg_encoder.config.has_ap_stream:
        raise VariantError("inter-model regression needs a DSTG model with an AP stream")
    rows = []
    for label, encoder in baselines:
        layers = min(encoder.config.layers, dstg_encoder.config.layers)
        for layer in range(layers + 1):
            src = hidden_features(encoder, docs, layer, "hidden")
            for target in ("ap", "sem"):
                dst = hidden_features(dstg_encoder, docs, layer, target)
                rows.append((label, layer, target, inter_model_regression(src, dst, lam, seed=seed)))
    return rows
