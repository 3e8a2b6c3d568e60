#!/usr/bin/env python3
"""
Managers module - Command-level functionality
"""

from .commands import (
    cmd_attn,
    cmd_compare,
    cmd_heads,
    cmd_hidden_pca,
    cmd_probe,
    cmd_spectrum,
    cmd_train,
    cmd_vocab,
)

from .config import (
    RunConfig,
    resolve_config,
)
