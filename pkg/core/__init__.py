#!/usr/bin/env python3
"""
Core module - Constants, shared state and the numeric building blocks
"""

from .constants import PATTERNS, PATHS, SPECIAL_TOKENS, VARIANTS
from .state import get_threads, set_threads, precision, set_quiet
