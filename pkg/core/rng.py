#!/usr/bin/env python3
"""
Named, seedable, splittable random streams

Every consumer asks for its own stream by name, e.g.
stream(seed, "mask", step, doc_index). Streams are Philox counter-based
generators keyed by a hash of (seed, *names), so the same name always yields
the same draws on every platform and no generator state has to be saved.
"""

import hashlib

import numpy as np


def _key_words(seed, names):
    """Hash seed and names into two 64-bit Philox key words"""
    text = "/".join([str(int(seed))] + [str(name) for name in names])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:16], "little")]


def stream(seed, *names):
    """
    Get an independent generator for the given seed and name path
    Parameters:
        seed: run seed
        names: any number of str/int components identifying the consumer
    Returns:
        numpy.random.Generator backed by Philox
    """
    key = np.array(_key_words(seed, names), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
