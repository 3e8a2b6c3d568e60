#!/usr/bin/env python3
"""
Config Manager - RunConfig schema, config files, CLI overrides and environment

Config files are flat `key = value` lines (a TOML subset: `#` comments,
quoted strings, numbers, booleans, `[a, b]` lists). Precedence, lowest first:
field defaults, environment (.env), config file, --set / shortcut flags.
"""

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

from common_utils import short_hash
from core.constants import ENV_KEYS, MLM_SCOPES, PATHS, PATTERNS, PROBE_TARGETS, STREAMS, VARIANTS
from core.errors import ConfigError
from core.model import ModelConfig
from managers.training import TrainConfig

GROUPS = ("model", "training", "analysis", "probe", "paths")
DOC_PATTERNS = ("single", "ABA")
LAYER_ZERO_MODES = ("embeddings", "first_block")


def _opt(default, group, help_text):
    return field(default=default, metadata={"group": group, "help": help_text})


@dataclass(frozen=True)
class RunConfig:
    """Every setting of a dstg command; each key documents its default"""

    # model
    variant: str = _opt("dstg", "model", "encoder variant: dstg, ap, rp or rope")
    layers: int = _opt(2, "model", "number of encoder blocks")
    heads: int = _opt(4, "model", "attention heads per block")
    d_ap: int = _opt(8, "model", "AP stream width (forced to 0 for baselines)")
    d_sem: int = _opt(56, "model", "semantic stream width")
    max_positions: int = _opt(128, "model", "rows of the learned position table")
    mlm_scope: str = _opt("semantic_only", "model", "MLM head input: semantic_only or full")
    num_buckets: int = _opt(32, "model", "RP bias buckets")
    max_distance: int = _opt(128, "model", "largest offset with its own logarithmic bucket")
    rope_base: float = _opt(10000.0, "model", "RoPE frequency base")
    # training
    steps: int = _opt(300, "training", "optimizer steps")
    batch_size: int = _opt(8, "training", "documents per step")
    peak_lr: float = _opt(3e-4, "training", "learning rate after warmup")
    warmup: int = _opt(30, "training", "linear warmup steps")
    weight_decay: float = _opt(0.01, "training", "decoupled AdamW weight decay")
    mask_rate: float = _opt(0.15, "training", "fraction of non-special tokens selected for MLM")
    mask_split: tuple = _opt((0.8, 0.1, 0.1), "training", "selected tokens: [MASK], random, unchanged")
    ap_shift: bool = _opt(True, "training", "randomly shift AP positions during training")
    seed: int = _opt(0, "training", "run seed for init, batches, masks and shifts")
    # analysis
    layer: int = _opt(-1, "analysis", "block analysed by attn / hidden-pca (-1 = last)")
    head: int = _opt(-1, "analysis", "head for heads (-1 = all heads)")
    include_special_rows: bool = _opt(True, "analysis", "average KL over [CLS]/[SEP] query rows too")
    taxonomy_threshold: float = _opt(0.5, "analysis", "share that makes a head sem / ap / rp instead of mixed")
    lowfreq_bins: int = _opt(4, "analysis", "DCT bins counted as low frequency")
    doc_index: int = _opt(0, "analysis", "corpus document used by attn / hidden-pca")
    doc_pattern: str = _opt("single", "analysis", "attn input: single document or ABA composite")
    stream: str = _opt("ap", "analysis", "hidden-pca stream: ap, sem, concat or hidden")
    embedding_csv: str = _opt("", "analysis", "imported m x d matrix for spectrum (no checkpoint needed)")
    # probe
    probe_lambda: float = _opt(1.0, "probe", "ridge strength")
    probe_seeds: int = _opt(5, "probe", "seeded 80/20 document splits per cell")
    probe_targets: tuple = _opt(PROBE_TARGETS, "probe", "targets: token_ap, segment_ap, intra_segment")
    probe_layer_zero: str = _opt("embeddings", "probe", "layer 0 row: embeddings or first_block")
    probe_unused_ap_layer: bool = _opt(False, "probe", "also probe the last AP layer of semantic_only models")
    boundary_tokens: tuple = _opt((".", "!", "?", "[NL]"), "probe", "tokens that close a segment")
    # paths
    corpus: str = _opt(str(PATHS['corpus']), "paths", "directory of .txt files")
    vocab: str = _opt(str(PATHS['vocab']), "paths", "vocabulary file, one token per line")
    max_len: int = _opt(64, "paths", "document length including [CLS]/[SEP]")
    concat: bool = _opt(True, "paths", "concatenate corpus files and chunk to max_len")
    vocab_build_size: int = _opt(2000, "paths", "size of vocabularies built by the vocab command")
    out: str = _opt("", "paths", "output root (default $DSTG_OUTPUT_ROOT or runs)")
    threads: int = _opt(1, "paths", "worker threads for per-document work")

    def model_config(self, vocab_size):
        try:
            return ModelConfig.for_variant(
                self.variant,
                layers=self.layers,
                heads=self.heads,
                d_ap=self.d_ap,
                d_sem=self.d_sem,
                max_positions=self.max_positions,
                vocab_size=vocab_size,
                mlm_scope=self.mlm_scope,
                num_buckets=self.num_buckets,
                max_distance=self.max_distance,
                rope_base=self.rope_base,
            )
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def train_config(self):
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            peak_lr=self.peak_lr,
            warmup=self.warmup,
            weight_decay=self.weight_decay,
            mask_rate=self.mask_rate,
            mask_split=self.mask_split,
            ap_shift=self.ap_shift,
            seed=self.seed,
        )

    def output_root(self):
        return Path(self.out or os.environ.get(ENV_KEYS['output_root']) or PATHS['output_root'])

    def to_text(self):
        """Resolved config as a loadable config file"""
        lines = []
        for group in GROUPS:
            lines.append(f"# {group}")
            for f in schema(group):
                lines.append(f"{f.name} = {format_config_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self, *extra):
        return short_hash(self.to_text() + "\n".join(str(e) for e in extra))


def schema(group=None):
    """RunConfig fields, optionally of one group"""
    return [f for f in fields(RunConfig) if group is None or f.metadata["group"] == group]


def config_keys():
    return [f.name for f in schema()]


def help_epilog():
    """Every config key with its default, grouped"""
    lines = ["config keys (--set key=value or a config file):"]
    for group in GROUPS:
        lines.append(f"  [{group}]")
        for f in schema(group):
            lines.append(f"    {f.name} = {format_config_value(f.default)}  # {f.metadata['help']}")
    return "\n".join(lines)


# ============================================================================
# VALUES
# ============================================================================

def format_config_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(format_config_value(v) for v in value) + "]"
    return '"' + str(value).replace('\\', '\\\\').replace('"', '\\"') + '"'


def _unquote(text):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _parse_scalar(text, kind):
    text = _unquote(text)
    if kind is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true or false, got '{text}'")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_value(key, raw):
    """Convert a raw string to the type of the RunConfig field"""
    by_name = {f.name: f for f in schema()}
    if key not in by_name:
        raise KeyError(key)
    default = by_name[key].default
    raw = raw.strip()
    if isinstance(default, tuple):
        body = raw[1:-1] if raw.startswith("[") and raw.endswith("]") else raw
        parts = [p for p in (s.strip() for s in body.split(",")) if p]
        kind = type(default[0]) if default else str
        return tuple(_parse_scalar(p, kind) for p in parts)
    return _parse_scalar(raw, type(default))


def _apply(values):
    """Parse (key, raw, where) triples into typed overrides"""
    known = set(config_keys())
    out = {}
    for key, raw, where in values:
        if key not in known:
            raise ConfigError(f"{where}: unknown config key '{key}'")
        try:
            out[key] = parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"{where}: invalid value for '{key}': {e}") from e
    return out


def read_config_file(path):
    """
    Typed overrides from a config file
    Raises ConfigError naming the line of unknown keys, malformed lines or bad values
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    line_of = {}
    for line_no, line in enumerate(lines, start=1):
        if PATTERNS['config_skip'].match(line):
            continue
        if line.strip().startswith("["):
            raise ConfigError(f"{path}:{line_no}: sections are not supported, use flat keys")
        match = PATTERNS['config_line'].match(line)
        if not match:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got '{line.strip()}'")
        line_of[match.group(1)] = line_no

    raw = dotenv_values(path)
    triples = []
    for key, line_no in line_of.items():
        value = raw.get(key)
        if value is None:
            raise ConfigError(f"{path}:{line_no}: missing value for '{key}'")
        triples.append((key, value, f"{path}:{line_no}"))
    return _apply(triples)


def parse_sets(sets):
    """--set key=value overrides"""
    triples = []
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        triples.append((key.strip(), value, f"--set {item}"))
    return _apply(triples)


def environment_overrides():
    """Defaults taken from the environment / .env"""
    load_dotenv()
    out = {}
    threads = os.environ.get(ENV_KEYS['threads'])
    if threads:
        try:
            out["threads"] = int(threads)
        except ValueError as e:
            raise ConfigError(f"{ENV_KEYS['threads']} must be an integer, got '{threads}'") from e
    return out


def validate(config):
    checks = [
        (config.variant in VARIANTS, f"variant must be one of {', '.join(VARIANTS)}"),
        (config.mlm_scope in MLM_SCOPES, f"mlm_scope must be one of {', '.join(MLM_SCOPES)}"),
        (config.doc_pattern in DOC_PATTERNS, f"doc_pattern must be one of {', '.join(DOC_PATTERNS)}"),
        (config.stream in STREAMS, f"stream must be one of {', '.join(STREAMS)}"),
        (config.probe_layer_zero in LAYER_ZERO_MODES, f"probe_layer_zero must be one of {', '.join(LAYER_ZERO_MODES)}"),
        (bool(config.probe_targets) and set(config.probe_targets) <= set(PROBE_TARGETS),
         f"probe_targets must be a non-empty subset of {', '.join(PROBE_TARGETS)}"),
        (config.threads >= 1, "threads must be >= 1"),
        (config.probe_seeds >= 1, "probe_seeds must be >= 1"),
        (config.probe_lambda >= 0, "probe_lambda must be >= 0"),
        (3 <= config.max_len <= 512, "max_len must lie in [3, 512]"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    config.train_config()
    config.model_config(vocab_size=2)
    return config


def resolve_config(config_path=None, sets=None, **shortcuts):
    """
    Merge defaults, environment, config file, --set and shortcut flags
    Parameters:
        config_path: optional config file
        sets: list of "key=value" strings
        shortcuts: flag values (None = not given), e.g. variant="rope"
    Returns:
        validated RunConfig
    """
    values = environment_overrides()
    if config_path:
        values.update(read_config_file(config_path))
    values.update(parse_sets(sets))
    values.update({k: v for k, v in shortcuts.items() if v is not None})
    unknown = set(values) - set(config_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return validate(replace(RunConfig(), **values))
