"""Corpus handling: tokenization, chunking, and sliding-window plans.

Documents are flat integer token sequences. A document is split into
contiguous chunks of exactly ``m`` tokens (a trailing remainder shorter than
``m`` is dropped and reported). Long documents are processed through a
sliding window: the first window covers ``window`` tokens and predicts all of
them; every later window slides forward by ``stride`` tokens, re-reading the
preceding ``window - stride`` tokens as context and predicting only the new
``stride`` tokens. Retrieval for a query chunk ``i`` may only look at chunks
that end at least ``w`` chunks earlier, which keeps the retrieved text
disjoint from the local context the model already attends to.

All indices in this package are 0-based: chunk ``i`` covers tokens
``[i*m, (i+1)*m)`` and its retrievable set is ``{j : j <= i - w}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MANIFEST_FORMAT = "partition-manifest"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# documents and tokenization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Document:
    """A tokenized document: an id and a 1-D int64 token array."""

    doc_id: str
    tokens: np.ndarray

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ValueError(f"document {self.doc_id!r}: tokens must be 1-D")
        if len(tokens) < 1:
            raise ValueError(f"document {self.doc_id!r}: empty token sequence")
        if (tokens < 0).any():
            raise ValueError(f"document {self.doc_id!r}: negative token id")
        object.__setattr__(self, "tokens", tokens)

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize_bytes(data: bytes) -> np.ndarray:
    """Byte-level tokenization: one token per byte, vocabulary size 256."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def tokenize_ids(text: str, vocab_size: int) -> np.ndarray:
    """Whitespace-separated integer ids, validated against ``vocab_size``."""
    parts = text.split()
    ids = np.empty(len(parts), dtype=np.int64)
    for k, part in enumerate(parts):
        try:
            ids[k] = int(part)
        except ValueError as exc:
            raise ValueError(f"not a token id: {part!r}") from exc
    if len(ids) and ids.max(initial=0) >= vocab_size:
        bad = int(ids[ids >= vocab_size][0])
        raise ValueError(f"token id {bad} out of range for vocab size {vocab_size}")
    if len(ids) and (ids < 0).any():
        raise ValueError("negative token id")
    return ids


def ingest(corpus_path: str | Path, tokenizer: str = "bytes", vocab_size: int = 256) -> list[Document]:
    """Load every regular file under ``corpus_path`` as one document.

    ``tokenizer`` is ``"bytes"`` (vocabulary forced to 256) or ``"ids"``
    (whitespace-separated integers checked against ``vocab_size``). Documents
    are returned sorted by id (the path relative to the corpus root) so the
    corpus order is deterministic. Unreadable files and out-of-range ids
    raise ``ValueError``.
    """
    root = Path(corpus_path)
    if tokenizer not in ("bytes", "ids"):
        raise ValueError(f"unknown tokenizer {tokenizer!r} (expected 'bytes' or 'ids')")
    if tokenizer == "bytes" and vocab_size != 256:
        raise ValueError("bytes tokenizer requires vocab_size == 256")
    if root.is_file():
        files = [root]
        base = root.parent
    elif root.is_dir():
        files = sorted(p for p in root.rglob("*") if p.is_file())
        base = root
    else:
        raise ValueError(f"corpus path does not exist: {root}")

    docs: list[Document] = []
    for path in files:
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ValueError(f"unreadable corpus file {path}") from exc
        doc_id = path.relative_to(base).as_posix()
        if tokenizer == "bytes":
            tokens = tokenize_bytes(raw)
        else:
            try:
                tokens = tokenize_ids(raw.decode("utf-8"), vocab_size)
            except (UnicodeDecodeError, ValueError) as exc:
                raise ValueError(f"bad token file {path}: {exc}") from exc
        if len(tokens) == 0:
            raise ValueError(f"empty document: {path}")
        docs.append(Document(doc_id=doc_id, tokens=tokens))
    return docs


# ---------------------------------------------------------------------------
# chunk partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChunkPartition:
    """A document split into ``n_chunks`` chunks of exactly ``m`` tokens."""

    doc_id: str
    tokens: np.ndarray
    m: int
    n_chunks: int
    dropped: int

    def chunk_tokens(self, i: int) -> np.ndarray:
        """Tokens of chunk ``i`` (a view, not a copy)."""
        if not 0 <= i < self.n_chunks:
            raise IndexError(f"chunk {i} out of range [0, {self.n_chunks})")
        return self.tokens[i * self.m : (i + 1) * self.m]

    def chunk_of_position(self, t: int) -> int:
        """Index of the chunk containing token position ``t``."""
        if not 0 <= t < len(self.tokens):
            raise IndexError(f"position {t} out of range")
        return t // self.m

    def __len__(self) -> int:
        return self.n_chunks


def partition(doc: Document, m: int) -> ChunkPartition:
    """Split ``doc`` into chunks of exactly ``m`` tokens, dropping a remainder."""
    if m < 1:
        raise ValueError(f"chunk size must be >= 1, got {m}")
    n_chunks = len(doc) // m
    dropped = len(doc) - n_chunks * m
    return ChunkPartition(
        doc_id=doc.doc_id, tokens=doc.tokens, m=m, n_chunks=n_chunks, dropped=dropped
    )


# ---------------------------------------------------------------------------
# retrievable sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievableSet:
    """Chunks a query chunk may retrieve from: ``{j : j <= query_index - w}``."""

    query_index: int
    w: int
    members: range

    def __contains__(self, j: int) -> bool:
        return j in self.members

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[int]:
        return iter(self.members)


def retrievable_set(query_index: int, w: int) -> RetrievableSet:
    """Retrievable chunk indices for a query chunk, excluding the ``w`` nearest.

    Empty for ``query_index < w``; otherwise ``range(0, query_index - w + 1)``.
    """
    if query_index < 0:
        raise ValueError(f"query index must be >= 0, got {query_index}")
    if w < 1:
        raise ValueError(f"exclusion window must be >= 1, got {w}")
    hi = max(0, query_index - w + 1)
    return RetrievableSet(query_index=query_index, w=w, members=range(0, hi))


# ---------------------------------------------------------------------------
# sliding-window plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpan:
    """One sliding-window step: read ``[input_start, input_end)``, predict
    the suffix ``[output_start, output_end)``."""

    input_start: int
    input_end: int
    output_start: int
    output_end: int

    @property
    def n_context(self) -> int:
        return self.output_start - self.input_start

    @property
    def n_output(self) -> int:
        return self.output_end - self.output_start


@dataclass(frozen=True)
class WindowPlan:
    """Complete sliding-window schedule for a document of ``length`` tokens."""

    length: int
    window: int
    stride: int
    spans: tuple[WindowSpan, ...]


def plan_windows(length: int, window: int, stride: int) -> WindowPlan:
    """Plan sliding windows over ``length`` tokens.

    The first span covers ``min(window, length)`` tokens and outputs all of
    them (documents shorter than one window become a single truncated span).
    Each later span outputs the next ``stride`` tokens (fewer at the document
    end) with the preceding ``window - stride`` tokens as re-read context.
    Output spans tile ``[0, length)`` exactly once.
    """
    if length < 1:
        raise ValueError(f"document length must be >= 1, got {length}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if stride > window:
        raise ValueError(f"stride {stride} exceeds window {window}")

    first_end = min(window, length)
    spans = [WindowSpan(0, first_end, 0, first_end)]
    out_start = first_end
    while out_start < length:
        out_end = min(out_start + stride, length)
        in_start = out_start - (window - stride)
        spans.append(WindowSpan(in_start, out_end, out_start, out_end))
        out_start = out_end
    return WindowPlan(length=length, window=window, stride=stride, spans=tuple(spans))


# ---------------------------------------------------------------------------
# manifest i/o
# ---------------------------------------------------------------------------


def write_manifest(partitions: Iterable[ChunkPartition], path: str | Path, *, tokenizer: str, vocab_size: int) -> None:
    """Write one manifest row per document: id, length, chunking summary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "tokenizer": tokenizer,
        "vocab_size": vocab_size,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for part in partitions:
            row = {
                "doc_id": part.doc_id,
                "length": int(len(part.tokens)),
                "m": part.m,
                "n_chunks": part.n_chunks,
                "dropped": part.dropped,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> tuple[dict, list[dict]]:
    """Read a manifest; returns ``(header, rows)`` and validates the header."""
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"empty manifest: {path}")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a partition manifest: {path}")
    if header.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {header.get('version')}")
    return header, [json.loads(line) for line in lines[1:]]
