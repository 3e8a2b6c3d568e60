#!/usr/bin/env python3
"""
Constants and compiled regex patterns
"""
import re
from pathlib import Path

# Regex patterns (compiled once)
PATTERNS = {
    # newline runs collapse into a single [NL] token
    'newline_run': re.compile(r'[\r\n]+'),
    # newline runs, words and single punctuation marks
    'basic_token': re.compile(r'[\r\n]+|\w+|[^\w\s]', re.UNICODE),
    'config_line': re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$'),
    'config_skip': re.compile(r'^\s*(#.*)?$'),
    'attn_file': re.compile(r'^attn_L(\d+)_H(\d+)_(sem|ap|rp|combined)\.(csv|svg)$'),
}

# Special tokens (order = ids in generated vocabularies)
SPECIAL_TOKENS = {
    'pad': "[PAD]",
    'unk': "[UNK]",
    'cls': "[CLS]",
    'sep': "[SEP]",
    'mask': "[MASK]",
}
NEWLINE_TOKEN = "[NL]"
CONTINUATION_PREFIX = "##"

# Default segment boundaries; override with RunConfig.boundary_tokens
BOUNDARY_TOKENS = (".", "!", "?", NEWLINE_TOKEN)

# Longest document the tokenizer produces
MAX_DOCUMENT_LEN = 512

# Words longer than this become a single [UNK]
MAX_WORD_CHARS = 100

# Label value for tokens excluded from probes ([CLS], [SEP])
SPECIAL_SEGMENT = -1

# Ignored label value for cross entropy
IGNORE_INDEX = -100

VARIANTS = ("dstg", "ap", "rp", "rope")
MLM_SCOPES = ("semantic_only", "full")
STREAMS = ("ap", "sem", "concat", "hidden")
PROBE_TARGETS = ("token_ap", "segment_ap", "intra_segment")
ATTENTION_COMPONENTS = ("sem", "ap", "rp", "combined")

# Path constants (relative to the repository / run directory)
PATHS = {
    'vocab': Path("data/vocab.txt"),
    'corpus': Path("data/corpus"),
    'output_root': Path("runs"),
    'resolved_config': "config.resolved",
    'checkpoint_dir': "checkpoint",
    'manifest': "manifest.json",
    'tensors': "tensors.bin",
    'loss_trace': "loss.csv",
}

CHECKPOINT_FORMAT_VERSION = 1

# CSV headers of every artifact
CSV_HEADERS = {
    'loss': ["step", "lr", "loss"],
    'heads': ["layer", "head", "score_sem", "score_ap", "score_rp", "norm_sem", "norm_ap", "norm_rp"],
    'heads_summary': ["category", "count"],
    'spectrum': ["pc", "variance_ratio", "lowfreq_share", "cumulative_variance"],
    'hidden_pca': ["token_index", "pc1", "pc2", "segment_id"],
    'probes': ["layer", "stream", "r2_mean", "r2_std", "n_train_docs", "n_test_docs", "lambda", "seeds"],
    'scope_compare': ["layer", "stream", "r2_semantic_only", "r2_full"],
    'intermodel': ["variant", "layer", "target_stream", "r2"],
}

# Environment variables
ENV_KEYS = {
    'output_root': "DSTG_OUTPUT_ROOT",
    'threads': "DSTG_THREADS",
}
