#!/usr/bin/env python3
"""
Error types raised across dstg-tools
The dispatcher catches DstgError, prints it and exits with status 1
"""


class DstgError(Exception):
    """Base class for every expected failure"""


class ShapeError(DstgError):
    """Tensor shapes do not line up"""


class NumericsError(DstgError):
    """Invalid numeric input (masked rows, non-scalar loss, ...)"""


class VocabError(DstgError):
    """Malformed vocabulary file"""


class CorpusError(DstgError):
    """Empty text, empty corpus directory, or an invalid document"""


class ConfigError(DstgError):
    """Invalid model / training / run configuration"""


class PositionError(DstgError):
    """Position ids outside the embedding table, bad shift ranges"""


class VariantError(DstgError):
    """Operation requested on a model variant that cannot support it"""


class CheckpointError(DstgError):
    """Unreadable, inconsistent or incompatible checkpoint"""


class ProbeError(DstgError):
    """Degenerate probe dataset or mismatched probe inputs"""
