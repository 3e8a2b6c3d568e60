#!/usr/bin/env python3
"""
Corpus Manager - vocabulary, WordPiece tokenization, documents and segment labels
"""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from common_utils import ordered_map, print_ok, print_step, print_warn, sha256_file
from core.constants import (
    BOUNDARY_TOKENS,
    CONTINUATION_PREFIX,
    MAX_DOCUMENT_LEN,
    MAX_WORD_CHARS,
    NEWLINE_TOKEN,
    PATTERNS,
    SPECIAL_SEGMENT,
    SPECIAL_TOKENS,
)
from core.errors import CorpusError, VocabError


# ============================================================================
# VOCABULARY
# ============================================================================

@dataclass
class Vocab:
    """Token list whose line order defines the ids"""

    tokens: list
    index: dict = field(default_factory=dict)
    sha256: str = ""

    def __post_init__(self):
        if not self.index:
            self.index = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token):
        return self.index.get(token, self.unk_id)

    @property
    def pad_id(self):
        return self.index[SPECIAL_TOKENS['pad']]

    @property
    def unk_id(self):
        return self.index[SPECIAL_TOKENS['unk']]

    @property
    def cls_id(self):
        return self.index[SPECIAL_TOKENS['cls']]

    @property
    def sep_id(self):
        return self.index[SPECIAL_TOKENS['sep']]

    @property
    def mask_id(self):
        return self.index[SPECIAL_TOKENS['mask']]

    @property
    def special_ids(self):
        return {self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id}


def load_vocab(path):
    """
    Load a vocabulary file: one token per line, line number = id
    Parameters:
        path: UTF-8 text file
    Returns:
        Vocab
    """
    path = Path(path)
    if not path.is_file():
        raise VocabError(f"vocab file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    seen = {}
    for line_no, token in enumerate(lines, start=1):
        if not token or token != token.strip():
            raise VocabError(f"{path}:{line_no}: empty token or surrounding whitespace")
        if token in seen:
            raise VocabError(f"{path}:{line_no}: duplicate token '{token}' (first on line {seen[token]})")
        seen[token] = line_no

    missing = [t for t in SPECIAL_TOKENS.values() if t not in seen]
    if missing:
        raise VocabError(f"{path}: missing special tokens {', '.join(missing)}")
    if NEWLINE_TOKEN not in seen:
        print_warn(f"{path}: no {NEWLINE_TOKEN} token, line breaks will not mark segment boundaries")
    return Vocab(tokens=lines, sha256=sha256_file(path))


def write_vocab(tokens, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(tokens) + "\n")
    return path


def build_vocab(corpus_dir, size=2000, min_count=1):
    """
    Generate a WordPiece-compatible vocabulary from a corpus
    Order: specials, [NL], every character and its ## continuation,
    then words by descending frequency, then ## suffix and word-start pieces.
    Parameters:
        corpus_dir: directory of .txt files
        size: maximum vocabulary size
        min_count: minimum word frequency
    Returns:
        list of tokens
    """
    words = Counter()
    for path in _corpus_files(corpus_dir):
        for match in PATTERNS['basic_token'].finditer(path.read_text(encoding="utf-8")):
            piece = match.group(0)
            if not PATTERNS['newline_run'].fullmatch(piece):
                words[piece.lower()] += 1

    tokens = list(SPECIAL_TOKENS.values()) + [NEWLINE_TOKEN]
    chars = sorted({ch for word in words for ch in word})
    tokens += chars + [CONTINUATION_PREFIX + ch for ch in chars]
    ranked = sorted(words.items(), key=lambda item: (-item[1], item[0]))
    tokens += [w for w, count in ranked if count >= min_count and len(w) > 1]

    suffixes, prefixes = Counter(), Counter()
    for word, count in words.items():
        for cut in range(1, len(word) - 1):
            suffixes[CONTINUATION_PREFIX + word[cut:]] += count
        for cut in range(2, len(word)):
            prefixes[word[:cut]] += count
    for pieces in (suffixes, prefixes):
        tokens += [p for p, _ in sorted(pieces.items(), key=lambda item: (-item[1], item[0]))]

    unique = list(dict.fromkeys(tokens))
    if len(unique) < len(SPECIAL_TOKENS) + 1:
        raise VocabError(f"corpus at {corpus_dir} yields no tokens")
    return unique[:max(size, len(SPECIAL_TOKENS) + 1)]


# ============================================================================
# TOKENIZATION
# ============================================================================

@dataclass
class Document:
    """
    One encoder input: [CLS] pieces [SEP]
    offsets holds (start, end) character spans in the source text, (-1, -1) for specials
    """

    ids: np.ndarray
    tokens: list
    offsets: np.ndarray
    special_mask: np.ndarray
    source: str = ""

    def __post_init__(self):
        n = len(self.ids)
        if n < 2 or n > MAX_DOCUMENT_LEN:
            raise CorpusError(f"document length {n} outside [2, {MAX_DOCUMENT_LEN}]")
        inner = self.special_mask[1:-1]
        if not (self.special_mask[0] and self.special_mask[-1]) or inner.any():
            raise CorpusError("document must hold exactly one [CLS] first and one [SEP] last")

    def __len__(self):
        return len(self.ids)

    @property
    def special_indices(self):
        return np.flatnonzero(self.special_mask)


def wordpiece(word, vocab):
    """
    Greedy longest-match split of one lowercased word
    Returns the pieces, or [UNK] when some suffix cannot be matched
    """
    if len(word) > MAX_WORD_CHARS:
        return [SPECIAL_TOKENS['unk']]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION_PREFIX + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [SPECIAL_TOKENS['unk']]
        pieces.append(match)
        start = end
    return pieces


def encode_pieces(text, vocab):
    """
    Content pieces of a text, without specials
    Returns:
        list of (token, start, end); a split word repeats its span on every piece
    """
    out = []
    for match in PATTERNS['basic_token'].finditer(text):
        raw = match.group(0)
        if PATTERNS['newline_run'].fullmatch(raw):
            # vocabularies without [NL] treat line breaks as plain whitespace
            if NEWLINE_TOKEN in vocab:
                out.append((NEWLINE_TOKEN, match.start(), match.end()))
            continue
        for piece in wordpiece(raw.lower(), vocab):
            out.append((piece, match.start(), match.end()))
    return out


def wrap_pieces(pieces, vocab, source=""):
    tokens = [SPECIAL_TOKENS['cls']] + [p[0] for p in pieces] + [SPECIAL_TOKENS['sep']]
    offsets = np.array([(-1, -1)] + [(p[1], p[2]) for p in pieces] + [(-1, -1)], dtype=np.int64)
    ids = np.array([vocab.id_of(t) for t in tokens], dtype=np.int64)
    special_mask = np.zeros(len(tokens), dtype=bool)
    special_mask[[0, -1]] = True
    return Document(ids=ids, tokens=tokens, offsets=offsets, special_mask=special_mask, source=source)


def tokenize(text, vocab, max_len=MAX_DOCUMENT_LEN, source=""):
    """
    Lowercase, split on newlines / words / punctuation, WordPiece each word
    Content is truncated to max_len - 2 pieces before wrapping with [CLS]/[SEP]
    """
    if not text or not text.strip():
        raise CorpusError("cannot tokenize empty text")
    if not 3 <= max_len <= MAX_DOCUMENT_LEN:
        raise CorpusError(f"max_len must lie in [3, {MAX_DOCUMENT_LEN}], got {max_len}")
    return wrap_pieces(encode_pieces(text, vocab)[:max_len - 2], vocab, source)


def decode(ids, vocab):
    """Text of a token id sequence; specials dropped, ## pieces glued, [NL] becomes a newline"""
    specials = {vocab.index[t] for t in SPECIAL_TOKENS.values() if t != SPECIAL_TOKENS['unk']}
    words = []
    for token_id in ids:
        token_id = int(token_id)
        if token_id in specials:
            continue
        token = vocab.tokens[token_id]
        if token.startswith(CONTINUATION_PREFIX) and words:
            words[-1] += token[len(CONTINUATION_PREFIX):]
        elif token == NEWLINE_TOKEN:
            words.append("\n")
        else:
            words.append(token)
    return " ".join(words)


def normalize_text(text):
    """Casing and whitespace normalisation under which decode inverts tokenize"""
    parts = []
    for match in PATTERNS['basic_token'].finditer(text):
        raw = match.group(0)
        parts.append("\n" if PATTERNS['newline_run'].fullmatch(raw) else raw.lower())
    return " ".join(parts)


# ============================================================================
# SEGMENTS
# ============================================================================

@dataclass
class SegmentLabels:
    """
    Per-token segment id, intra-segment progress and segment lengths
    Specials carry SPECIAL_SEGMENT and progress 0; singleton marks one-token segments
    """

    segment_ids: np.ndarray
    intra: np.ndarray
    lengths: list
    singleton: np.ndarray

    @property
    def valid(self):
        return self.segment_ids != SPECIAL_SEGMENT

    @property
    def n_segments(self):
        return len(self.lengths)


def segment_labels(doc, boundary_tokens=BOUNDARY_TOKENS):
    """
    Label segments: a boundary token closes the segment it belongs to
    Parameters:
        doc: Document
        boundary_tokens: token strings ending a segment
    Returns:
        SegmentLabels
    """
    boundaries = set(boundary_tokens)
    n = len(doc)
    segment_ids = np.full(n, SPECIAL_SEGMENT, dtype=np.int64)
    index_in_segment = np.zeros(n, dtype=np.int64)
    lengths = []
    current, count = 0, 0
    for i in range(n):
        if doc.special_mask[i]:
            continue
        segment_ids[i] = current
        index_in_segment[i] = count
        count += 1
        if doc.tokens[i] in boundaries:
            lengths.append(count)
            current, count = current + 1, 0
    if count:
        lengths.append(count)

    intra = np.zeros(n, dtype=np.float64)
    singleton = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(segment_ids != SPECIAL_SEGMENT):
        length = lengths[segment_ids[i]]
        if length == 1:
            singleton[i] = True
        else:
            intra[i] = index_in_segment[i] / (length - 1)
    return SegmentLabels(segment_ids=segment_ids, intra=intra, lengths=lengths, singleton=singleton)


# ============================================================================
# CORPUS
# ============================================================================

def _corpus_files(corpus_dir):
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise CorpusError(f"corpus directory not found: {corpus_dir}")
    files = sorted(p for p in corpus_dir.iterdir() if p.suffix == ".txt" and p.is_file())
    if not files:
        raise CorpusError(f"no .txt files in {corpus_dir}")
    return files


def build_corpus(corpus_dir, vocab, max_len, concat=True):
    """
    Tokenize every .txt file of a directory
    Parameters:
        corpus_dir: directory of UTF-8 .txt files (sorted by name)
        vocab: Vocab
        max_len: document length including [CLS]/[SEP]
        concat: join all files and chunk into documents of exactly max_len tokens
                (last partial chunk dropped); otherwise one truncated document per file
    Returns:
        list of Document
    """
    if not 3 <= max_len <= MAX_DOCUMENT_LEN:
        raise CorpusError(f"max_len must lie in [3, {MAX_DOCUMENT_LEN}], got {max_len}")
    files = _corpus_files(corpus_dir)
    print_step(f"📚 Tokenizing {len(files)} corpus file(s) from {corpus_dir}")

    def _read(path):
        return path.name, encode_pieces(path.read_text(encoding="utf-8"), vocab)

    encoded = ordered_map(_read, files)
    if concat:
        stream = [(name, piece) for name, pieces in encoded for piece in pieces]
        width = max_len - 2
        docs = []
        for start in range(0, len(stream) - width + 1, width):
            chunk = stream[start:start + width]
            docs.append(wrap_pieces([p for _, p in chunk], vocab, source=chunk[0][0]))
    else:
        docs = [wrap_pieces(pieces[:max_len - 2], vocab, source=name) for name, pieces in encoded if pieces]

    if not docs:
        raise CorpusError(f"corpus {corpus_dir} is too small for documents of {max_len} tokens")
    print_ok(f"{len(docs)} documents of up to {max_len} tokens")
    return docs
