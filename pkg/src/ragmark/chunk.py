"""Split documents into retrieval-sized chunks.

Two strategies: a sentence-preserving splitter (greedy sentence packing,
no overlap) and a recursive splitter that packs whole paragraphs, falls
back to sentences and then words, and carries a token overlap between
neighbouring chunks.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ragmark.ingest import Document

# A token is a maximal run of letters/digits/apostrophes; any other
# non-space character stands alone.
_TOKEN_RE = re.compile(r"(?:[^\W_]|')+|\S")

_PARAGRAPH_RE = re.compile(r"\n\s*\n")

_TERMINATORS = ".!?"

# Trailing words that suppress a sentence break after their period.
_ABBREVIATIONS = {"dr", "mr", "mrs", "ms", "prof", "e.g", "i.e", "vs"}

STRATEGY_SENTENCE = "sentence"
STRATEGY_RECURSIVE = "recursive"


def tokenize(text: str) -> list[str]:
    """Unicode-aware word tokenization; whitespace is discarded."""
    return _TOKEN_RE.findall(text)


def token_count(text: str) -> int:
    return len(tokenize(text))


def split_paragraphs(text: str) -> list[str]:
    """Split on blank lines, dropping empty segments."""
    parts = [p.strip() for p in _PARAGRAPH_RE.split(text)]
    return [p for p in parts if p]


def _preceding_word(text: str) -> str:
    m = re.search(r"([^\W_]+(?:\.[^\W_]+)*)\s*$", text)
    return m.group(1) if m else ""


def _split_paragraph_sentences(para: str) -> list[str]:
    out = []
    start = 0
    i = 0
    n = len(para)
    while i < n:
        if para[i] not in _TERMINATORS:
            i += 1
            continue
        j = i + 1
        while j < n and para[j] in _TERMINATORS:
            j += 1
        k = j
        while k < n and para[k].isspace():
            k += 1
        followed_by_upper = k > j and k < n and para[k].isupper()
        if followed_by_upper and _preceding_word(para[:i]).lower() not in _ABBREVIATIONS:
            seg = para[start:j].strip()
            if seg:
                out.append(seg)
            start = k
            i = k
        else:
            i = j
    tail = para[start:].strip()
    if tail:
        out.append(tail)
    return out


def split_sentences(text: str) -> list[str]:
    """Split into sentences at . ! ? followed by whitespace and an uppercase
    letter; paragraph breaks always terminate a sentence.

    Joining the result with single spaces preserves the input's token
    sequence.
    """
    sentences: list[str] = []
    for para in split_paragraphs(text):
        sentences.extend(_split_paragraph_sentences(para))
    return sentences


@dataclass(frozen=True)
class Chunk:
    """A retrievable text segment with provenance."""

    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    ordinal: int

    def __post_init__(self) -> None:
        if self.token_count != token_count(self.text):
            raise ValueError(
                f"token_count {self.token_count} does not match text "
                f"({token_count(self.text)} tokens)"
            )
        if self.ordinal < 0:
            raise ValueError("ordinal must be >= 0")


@dataclass(frozen=True)
class SplitterConfig:
    strategy: str = STRATEGY_RECURSIVE
    max_tokens: int = 1024
    overlap_tokens: int = 102

    def __post_init__(self) -> None:
        if self.strategy not in (STRATEGY_SENTENCE, STRATEGY_RECURSIVE):
            raise ValueError(f"unknown strategy: {self.strategy!r}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.overlap_tokens < 0:
            raise ValueError("overlap_tokens must be >= 0")
        if self.overlap_tokens >= self.max_tokens:
            raise ValueError("overlap_tokens must be smaller than max_tokens")


def _make_chunk(doc_id: str, ordinal: int, text: str) -> Chunk:
    return Chunk(
        chunk_id=f"{doc_id}#{ordinal:04d}",
        doc_id=doc_id,
        text=text,
        token_count=token_count(text),
        ordinal=ordinal,
    )


# Overlap may round up to a sentence boundary, but never by more than
# this many tokens past the configured overlap.
OVERLAP_SLACK = 20


def _take_overlap(prev_text: str, overlap_tokens: int) -> tuple[str, int]:
    """Suffix of the previous chunk to prepend to the next one.

    Prefers the shortest sentence-aligned suffix of at least
    ``overlap_tokens`` tokens; falls back to a word-aligned suffix when
    sentence alignment would exceed overlap_tokens + OVERLAP_SLACK.
    """
    if overlap_tokens == 0:
        return "", 0
    acc: list[str] = []
    count = 0
    for sent in reversed(split_sentences(prev_text)):
        if count >= overlap_tokens:
            break
        acc.append(sent)
        count += token_count(sent)
    if 0 < count <= overlap_tokens + OVERLAP_SLACK and count >= min(
        overlap_tokens, token_count(prev_text)
    ):
        return " ".join(reversed(acc)), count
    acc = []
    count = 0
    for word in reversed(prev_text.split()):
        if count >= overlap_tokens:
            break
        acc.append(word)
        count += token_count(word)
    return " ".join(reversed(acc)), count


_LEVEL_PARAGRAPH = 0
_LEVEL_SENTENCE = 1
_LEVEL_WORD = 2

_SEPARATORS = {_LEVEL_PARAGRAPH: "\n\n", _LEVEL_SENTENCE: " ", _LEVEL_WORD: " "}


class _ChunkAccumulator:
    """Greedy packer shared by the recursive splitter levels."""

    def __init__(self, cfg: SplitterConfig) -> None:
        self.cfg = cfg
        self.texts: list[str] = []
        self._parts: list[str] = []
        self._count = 0
        self._has_content = False

    def add(self, text: str, level: int) -> None:
        ntok = token_count(text)
        if ntok == 0:
            return
        if self._count + ntok <= self.cfg.max_tokens:
            self._append(text, level, ntok)
            return
        if self._has_content:
            self._flush()
        if self._count + ntok <= self.cfg.max_tokens:
            self._append(text, level, ntok)
            return
        if level == _LEVEL_PARAGRAPH:
            for sent in split_sentences(text):
                self.add(sent, _LEVEL_SENTENCE)
        elif level == _LEVEL_SENTENCE:
            for word in text.split():
                self.add(word, _LEVEL_WORD)
        else:
            # Single indivisible word larger than the remaining budget:
            # emit it as its own chunk rather than splitting inside a token.
            self._parts = []
            self._count = 0
            self._append(text, level, ntok)
            self._flush()

    def _append(self, text: str, level: int, ntok: int) -> None:
        if self._parts:
            self._parts.append(_SEPARATORS[level])
        self._parts.append(text)
        self._count += ntok
        self._has_content = True

    def _flush(self) -> None:
        chunk_text = "".join(self._parts)
        self.texts.append(chunk_text)
        overlap_text, overlap_count = _take_overlap(chunk_text, self.cfg.overlap_tokens)
        self._parts = [overlap_text] if overlap_text else []
        self._count = overlap_count
        self._has_content = False

    def finish(self) -> list[str]:
        if self._has_content:
            self._flush()
        return self.texts


def split_recursive(doc: Document, cfg: SplitterConfig) -> list[Chunk]:
    """Pack whole paragraphs greedily, falling back to sentences and then
    words for oversize units; every chunk after the first starts with the
    tail of the previous one.
    """
    if cfg.strategy != STRATEGY_RECURSIVE:
        raise ValueError(f"expected recursive strategy, got {cfg.strategy!r}")
    acc = _ChunkAccumulator(cfg)
    for para in split_paragraphs(doc.text):
        acc.add(para, _LEVEL_PARAGRAPH)
    return [_make_chunk(doc.id, i, text) for i, text in enumerate(acc.finish())]


def _pack_words(words: list[str], max_tokens: int) -> list[str]:
    groups: list[str] = []
    cur: list[str] = []
    count = 0
    for word in words:
        ntok = token_count(word)
        if cur and count + ntok > max_tokens:
            groups.append(" ".join(cur))
            cur = []
            count = 0
        cur.append(word)
        count += ntok
    if cur:
        groups.append(" ".join(cur))
    return groups


def split_sentencewise(doc: Document, cfg: SplitterConfig) -> list[Chunk]:
    """Pack whole sentences greedily up to max_tokens with no overlap.

    A single sentence longer than max_tokens is split at word boundaries.
    """
    if cfg.strategy != STRATEGY_SENTENCE:
        raise ValueError(f"expected sentence strategy, got {cfg.strategy!r}")
    pieces: list[str] = []
    for sent in split_sentences(doc.text):
        if token_count(sent) > cfg.max_tokens:
            pieces.extend(_pack_words(sent.split(), cfg.max_tokens))
        else:
            pieces.append(sent)

    texts: list[str] = []
    cur: list[str] = []
    count = 0
    for piece in pieces:
        ntok = token_count(piece)
        if cur and count + ntok > cfg.max_tokens:
            texts.append(" ".join(cur))
            cur = []
            count = 0
        cur.append(piece)
        count += ntok
    if cur:
        texts.append(" ".join(cur))
    return [_make_chunk(doc.id, i, text) for i, text in enumerate(texts)]


def split_document(doc: Document, cfg: SplitterConfig) -> list[Chunk]:
    if cfg.strategy == STRATEGY_RECURSIVE:
        return split_recursive(doc, cfg)
    return split_sentencewise(doc, cfg)


def write_chunks(chunks: Iterable[Chunk], path: str | Path) -> None:
    """One JSON object per line, fields as in Chunk."""
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(
                json.dumps(
                    {
                        "chunk_id": chunk.chunk_id,
                        "doc_id": chunk.doc_id,
                        "text": chunk.text,
                        "token_count": chunk.token_count,
                        "ordinal": chunk.ordinal,
                    },
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def read_chunks(path: str | Path) -> list[Chunk]:
    chunks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            chunks.append(
                Chunk(
                    chunk_id=rec["chunk_id"],
                    doc_id=rec["doc_id"],
                    text=rec["text"],
                    token_count=rec["token_count"],
                    ordinal=rec["ordinal"],
                )
            )
    return chunks
