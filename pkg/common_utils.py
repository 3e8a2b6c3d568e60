#!/usr/bin/env python3
"""
Common Utilities Module
Shared console, file and worker helpers for dstg-tools
"""

import csv
import hashlib
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from pathlib import Path

from core.state import get_threads, is_quiet

# ============================================================================
# COLOR CONSTANTS
# ============================================================================

# Colors for output
RED = '\033[0;31m'
GREEN = '\033[0;32m'
YELLOW = '\033[1;33m'
BLUE = '\033[0;34m'
NC = '\033[0m'
MAGENTA = '\033[0;35m'
CHECKMARK = '\033[32m✓\033[0m'
CROSS = '\033[31m✗\033[0m'

# Disable colors on Windows CMD (unless using Windows Terminal)
if platform.system() == "Windows" and not os.environ.get('WT_SESSION'):
    RED = GREEN = YELLOW = BLUE = NC = MAGENTA = ''
    CHECKMARK = '✓'
    CROSS = '✗'

# ============================================================================
# CONSOLE OUTPUT
# ============================================================================

def print_step(message):
    """Announce the start of a step"""
    if not is_quiet():
        print(f"{BLUE}{message}{NC}", flush=True)


def print_ok(message):
    """Report a finished step"""
    if not is_quiet():
        print(f"{CHECKMARK} {GREEN}{message}{NC}", flush=True)


def print_warn(message):
    if not is_quiet():
        print(f"{YELLOW}⚠️  {message}{NC}", flush=True)


def print_error(message):
    """Errors are printed even in quiet mode"""
    print(f"{CROSS} {RED}{message}{NC}", flush=True)

# ============================================================================
# TIMER DECORATOR
# ============================================================================

def timer_decorator(func):
    """
    Decorator to automatically add timer functionality to any function
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.time()

        # Execute the original function
        result = func(*args, **kwargs)

        if is_quiet():
            return result
        end_time = time.time()
        total_seconds = end_time - start_time
        minutes, seconds = divmod(total_seconds, 60)

        print(f"\n{BLUE}======================================================{NC}")
        print(f"{BLUE}Total time taken: {int(minutes)} minute(s) and {seconds:.2f} seconds.{NC}")
        print(f"{BLUE}======================================================{NC}")

        return result
    return wrapper

# ============================================================================
# WORKERS
# ============================================================================

def ordered_map(func, items):
    """
    Map func over items on up to get_threads() workers
    Results come back in input order, so merges stay deterministic
    """
    items = list(items)
    threads = min(get_threads(), len(items))
    if threads <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))

# ============================================================================
# FILE OPERATIONS
# ============================================================================

def format_value(value):
    """Stable text form of a CSV cell"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "item"):
        return format_value(value.item())
    return str(value)


def write_csv(path, header, rows):
    """
    Write a CSV artifact with LF line endings
    Parameters:
        path: output file
        header: column names, or None for a headerless matrix
        rows: iterables of cell values, formatted with format_value
    Returns:
        Path of the written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(cell) for cell in row])
    return path


def read_csv(path):
    """Read a CSV artifact into (header, rows of strings)"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def sha256_file(path):
    """Hex sha256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def short_hash(text, length=10):
    """Short hex digest of a string (run directory names)"""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]
