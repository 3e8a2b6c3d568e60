#!/usr/bin/env python3
"""
Command Manager - one function per dstg subcommand

Every command resolves its run directory from the command name, the resolved
config and its inputs, writes config.resolved there first, then its artifacts.
"""

from pathlib import Path

from common_utils import print_ok, print_step, print_warn, timer_decorator, write_csv
from core.constants import PATHS
from core.errors import CheckpointError, ConfigError
from core.state import set_threads
from managers.analysis import (
    attention_maps,
    composite_document,
    embedding_spectrum,
    head_influence_table,
    hidden_pca,
    intermodel_suite,
    load_matrix_csv,
    position_table,
    require_dstg,
    taxonomy_counts,
)
from managers.checkpoint import load_checkpoint, save_checkpoint
from managers.corpus import build_corpus, build_vocab, load_vocab, write_vocab
from managers.probes import (
    check_tokenization,
    checkpoint_label,
    collect_features,
    compare_mlm_scope,
    probe_table,
    run_probe,
    run_probe_suite,
)
from managers.report import (
    write_attention_maps,
    write_heads,
    write_heads_summary,
    write_hidden_pca,
    write_intermodel,
    write_loss_trace,
    write_probe_report,
    write_scope_compare,
    write_spectrum,
)
from managers.training import train


# ============================================================================
# RUN DIRECTORIES
# ============================================================================

def prepare_run(command, config, *inputs):
    """
    Create {output_root}/{command}-{hash} and write config.resolved into it
    Parameters:
        command: subcommand name
        config: RunConfig
        inputs: checkpoint paths and other positional inputs, part of the hash
    Returns:
        Path of the run directory
    """
    set_threads(config.threads)
    run_dir = config.output_root() / f"{command}-{config.digest(command, *inputs)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    header = [f"# command: {command}"] + [f"# input: {item}" for item in inputs]
    with open(run_dir / PATHS['resolved_config'], "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(header) + "\n" + config.to_text())
    print_step(f"📁 Run directory: {run_dir}")
    return run_dir


def _load_checkpoints(paths, vocab):
    if not paths:
        raise ConfigError("no checkpoint given")
    checkpoints = []
    for path in paths:
        ckpt = load_checkpoint(path)
        sha = ckpt.tokenizer.get("vocab_sha256")
        if sha != vocab.sha256:
            raise CheckpointError(f"{path}: tokenizer mismatch, trained with vocab {sha} but {vocab.sha256} is loaded")
        checkpoints.append(ckpt)
    return checkpoints


def _analysis_corpus(config, vocab, checkpoints):
    """Documents tokenized the way the checkpoints were trained"""
    check_tokenization(checkpoints)
    max_len = int(checkpoints[0].tokenizer.get("max_len", config.max_len))
    if max_len != config.max_len:
        print_warn(f"using the checkpoint's max_len {max_len} instead of {config.max_len}")
    return build_corpus(config.corpus, vocab, max_len, config.concat), max_len


def _load_for_analysis(config, paths):
    vocab = load_vocab(config.vocab)
    checkpoints = _load_checkpoints(paths, vocab)
    docs, max_len = _analysis_corpus(config, vocab, checkpoints)
    return vocab, checkpoints, docs, max_len


def _pick_document(config, docs):
    if not 0 <= config.doc_index < len(docs):
        raise ConfigError(f"doc_index {config.doc_index} outside [0, {len(docs)})")
    return docs[config.doc_index]


# ============================================================================
# COMMANDS
# ============================================================================

@timer_decorator
def cmd_train(config, resume=None):
    """
    Train the configured variant
    Writes checkpoint/ and loss.csv; with resume, continues a saved checkpoint
    """
    inputs = [resume] if resume else []
    run_dir = prepare_run("train", config, *inputs)
    vocab = load_vocab(config.vocab)
    docs = build_corpus(config.corpus, vocab, config.max_len, config.concat)
    previous = None
    if resume:
        previous = _load_checkpoints([resume], vocab)[0]
        if previous.variant != config.variant:
            print_warn(f"resuming a '{previous.variant}' checkpoint, config variant '{config.variant}' ignored")

    result = train(
        config.model_config(len(vocab)),
        config.train_config(),
        docs,
        vocab,
        resume=previous,
        max_len=config.max_len,
    )
    ckpt_dir = save_checkpoint(run_dir / PATHS['checkpoint_dir'], result.checkpoint)
    write_loss_trace(run_dir / PATHS['loss_trace'], result.losses)
    print_ok(f"Checkpoint saved to {ckpt_dir}")
    return run_dir


@timer_decorator
def cmd_probe(config, checkpoint_paths):
    """
    Structural probes of every checkpoint
    Writes probes_{label}_{target}.csv, the side-by-side probes_table_{target}.csv
    for two or more checkpoints and compare_mlm_scope_{target}.csv when both
    DSTG scopes are present
    """
    run_dir = prepare_run("probe", config, *checkpoint_paths)
    _, checkpoints, docs, _ = _load_for_analysis(config, checkpoint_paths)
    suite = run_probe_suite(
        checkpoints,
        docs,
        targets=config.probe_targets,
        lam=config.probe_lambda,
        seeds=config.probe_seeds,
        layer_zero=config.probe_layer_zero,
        probe_unused_ap_layer=config.probe_unused_ap_layer,
        boundary_tokens=config.boundary_tokens,
    )
    for report in suite.reports:
        write_probe_report(run_dir / f"probes_{report.label}_{report.target}.csv", report)
    if len(checkpoints) > 1:
        for target in config.probe_targets:
            header, rows = probe_table(suite.reports, target)
            write_csv(run_dir / f"probes_table_{target}.csv", header, rows)
    for target, rows in suite.scope_comparison.items():
        write_scope_compare(run_dir / f"compare_mlm_scope_{target}.csv", rows)
    print_ok(f"{len(suite.reports)} probe report(s) written")
    return run_dir


@timer_decorator
def cmd_heads(config, checkpoint_path):
    """KL-ablation influence of every head → heads.csv + heads_summary.csv"""
    run_dir = prepare_run("heads", config, checkpoint_path)
    vocab = load_vocab(config.vocab)
    ckpt = _load_checkpoints([checkpoint_path], vocab)[0]
    require_dstg(ckpt.model_config, "heads")
    docs, _ = _analysis_corpus(config, vocab, [ckpt])

    table = head_influence_table(ckpt.encoder, docs, include_special_rows=config.include_special_rows)
    if config.head >= 0:
        if config.head >= ckpt.model_config.heads:
            raise ConfigError(f"head {config.head} outside [0, {ckpt.model_config.heads})")
        table = [item for item in table if item.head == config.head]
    write_heads(run_dir / "heads.csv", table)
    counts = taxonomy_counts(table, config.taxonomy_threshold)
    write_heads_summary(run_dir / "heads_summary.csv", counts)
    print_ok("Heads: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return run_dir


@timer_decorator
def cmd_spectrum(config, checkpoint_path=None):
    """
    PCA + DCT spectrum of a position table → spectrum.csv
    Source: config.embedding_csv if set, else the checkpoint's learned table
    """
    if config.embedding_csv:
        run_dir = prepare_run("spectrum", config)
        matrix = load_matrix_csv(config.embedding_csv)
        source = config.embedding_csv
    else:
        if not checkpoint_path:
            raise ConfigError("spectrum needs a checkpoint or embedding_csv")
        run_dir = prepare_run("spectrum", config, checkpoint_path)
        matrix = position_table(load_checkpoint(checkpoint_path).encoder)
        source = checkpoint_path
    report = embedding_spectrum(matrix, config.lowfreq_bins)
    write_spectrum(run_dir / "spectrum.csv", report)
    if len(report.cumulative_variance) >= 2:
        print_ok(f"{source}: first two PCs explain {report.cumulative_variance[1]:.4f} of the variance")
    return run_dir


@timer_decorator
def cmd_attn(config, checkpoint_path):
    """Per-component attention maps of one layer → attn_L{l}_H{h}_{component}.csv/.svg"""
    run_dir = prepare_run("attn", config, checkpoint_path)
    vocab, checkpoints, docs, max_len = _load_for_analysis(config, [checkpoint_path])
    encoder = checkpoints[0].encoder
    require_dstg(encoder.config, "attn")
    doc = composite_document(docs, vocab, max_len) if config.doc_pattern == "ABA" else _pick_document(config, docs)
    layer = encoder.config.layers - 1 if config.layer < 0 else config.layer
    written = write_attention_maps(run_dir, attention_maps(encoder, doc, layer))
    print_ok(f"{len(written)} attention files for layer {layer} ({len(doc)} tokens)")
    return run_dir


@timer_decorator
def cmd_hidden_pca(config, checkpoint_path):
    """
    2D PCA of one stream's hidden states → hidden_pca_L{l}.csv
    layer -1 picks the last analysable hidden state
    """
    run_dir = prepare_run("hidden-pca", config, checkpoint_path)
    _, checkpoints, docs, _ = _load_for_analysis(config, [checkpoint_path])
    encoder = checkpoints[0].encoder
    model = encoder.config
    layer = config.layer
    if layer < 0:
        layer = model.layers
        if config.stream in ("ap", "concat") and model.mlm_scope == "semantic_only":
            layer -= 1
    result = hidden_pca(encoder, _pick_document(config, docs), layer, config.stream, config.boundary_tokens)
    write_hidden_pca(run_dir / f"hidden_pca_L{layer}.csv", result)
    print_ok(f"Layer {layer} {config.stream}: PC1/PC2 explain "
             f"{result.variance_ratios[0]:.4f} / {result.variance_ratios[1]:.4f}")
    return run_dir


@timer_decorator
def cmd_compare(config, checkpoint_paths):
    """
    Cross-model comparisons
    semantic_only + full DSTG → compare_mlm_scope_{target}.csv
    DSTG + baselines → intermodel.csv
    """
    run_dir = prepare_run("compare", config, *checkpoint_paths)
    _, checkpoints, docs, _ = _load_for_analysis(config, checkpoint_paths)
    by_label = {}
    for ckpt in checkpoints:
        label = checkpoint_label(ckpt.model_config)
        if label in by_label:
            raise ConfigError(f"two checkpoints share the label '{label}'")
        by_label[label] = ckpt

    written = 0
    if "dstg" in by_label and "dstg_full" in by_label:
        features = {
            label: collect_features(by_label[label].encoder, docs, config.probe_targets, config.boundary_tokens)
            for label in ("dstg", "dstg_full")
        }
        for target in config.probe_targets:
            reports = [
                run_probe(by_label[label].encoder, docs, target, config.probe_lambda, config.probe_seeds,
                          config.probe_layer_zero, True, config.boundary_tokens, label, doc_features=features[label])
                for label in ("dstg", "dstg_full")
            ]
            write_scope_compare(run_dir / f"compare_mlm_scope_{target}.csv", compare_mlm_scope(*reports))
            written += 1

    dstg = by_label.get("dstg") or by_label.get("dstg_full")
    baselines = [(label, ckpt.encoder) for label, ckpt in by_label.items() if ckpt.variant != "dstg"]
    if dstg is not None and baselines:
        rows = intermodel_suite(dstg.encoder, baselines, docs, config.probe_lambda, config.seed)
        write_intermodel(run_dir / "intermodel.csv", rows)
        written += 1

    if not written:
        raise ConfigError("compare needs a semantic_only and a full DSTG checkpoint, "
                          "or a DSTG checkpoint plus baseline checkpoints")
    print_ok(f"{written} comparison file(s) written")
    return run_dir


@timer_decorator
def cmd_vocab(config):
    """Build a WordPiece vocabulary from the corpus → vocab.txt in the run directory"""
    run_dir = prepare_run("vocab", config)
    tokens = build_vocab(config.corpus, config.vocab_build_size)
    path = write_vocab(tokens, run_dir / Path(PATHS['vocab']).name)
    print_ok(f"{len(tokens)} tokens written to {path}")
    return run_dir
