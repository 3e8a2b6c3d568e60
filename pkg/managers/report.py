#!/usr/bin/env python3
"""
Report Manager - CSV and SVG artifacts of the analyses and probes
"""

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from common_utils import write_csv  # noqa: E402
from core.constants import ATTENTION_COMPONENTS, CSV_HEADERS  # noqa: E402

# fixed SVG ids and no timestamp, so reruns produce identical files
matplotlib.rcParams["svg.hashsalt"] = "dstg-tools"
matplotlib.rcParams["svg.fonttype"] = "none"


def write_loss_trace(path, losses):
    return write_csv(path, CSV_HEADERS['loss'], losses)


def write_spectrum(path, report):
    rows = [
        (pc, float(report.variance_ratios[pc]), float(report.lowfreq_share[pc]), float(report.cumulative_variance[pc]))
        for pc in range(len(report.variance_ratios))
    ]
    return write_csv(path, CSV_HEADERS['spectrum'], rows)


def write_heads(path, influences):
    rows = [
        (item.layer, item.head, *(float(x) for x in item.raw), *(float(x) for x in item.normalized))
        for item in influences
    ]
    return write_csv(path, CSV_HEADERS['heads'], rows)


def write_heads_summary(path, counts):
    return write_csv(path, CSV_HEADERS['heads_summary'], counts.items())


def write_hidden_pca(path, result):
    rows = [
        (int(t), float(c[0]), float(c[1]), int(s))
        for t, c, s in zip(result.token_index, result.coords, result.segment_ids)
    ]
    return write_csv(path, CSV_HEADERS['hidden_pca'], rows)


def write_matrix_csv(path, matrix):
    """Headerless numeric matrix"""
    return write_csv(path, None, np.asarray(matrix, dtype=np.float64))


def write_heatmap(path, matrix, title):
    """
    SVG heatmap with a fixed monotone ramp normalised per map
    """
    fig, ax = plt.subplots(figsize=(4, 4))
    image = ax.imshow(matrix, cmap="viridis", interpolation="nearest", aspect="equal")
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("key j")
    ax.set_ylabel("query i")
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def write_attention_maps(out_dir, map_set):
    """attn_L{l}_H{h}_{component}.csv + .svg for every head and component"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for head, maps in enumerate(map_set.maps):
        for component in ATTENTION_COMPONENTS:
            stem = f"attn_L{map_set.layer}_H{head}_{component}"
            written.append(write_matrix_csv(out_dir / f"{stem}.csv", maps[component]))
            written.append(write_heatmap(out_dir / f"{stem}.svg", maps[component], f"layer {map_set.layer} head {head}: {component}"))
    return written


def write_probe_report(path, report):
    rows = [
        (c.layer, c.stream, c.r2_mean, c.r2_std, c.n_train_docs, c.n_test_docs, c.lam, c.seeds)
        for c in report.present()
    ]
    return write_csv(path, CSV_HEADERS['probes'], rows)


def write_scope_compare(path, rows):
    return write_csv(path, CSV_HEADERS['scope_compare'], rows)


def write_intermodel(path, rows):
    return write_csv(path, CSV_HEADERS['intermodel'], rows)
