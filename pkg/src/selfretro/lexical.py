"""Okapi BM25 over token-id chunks, used for retrieval candidates.

The index treats each chunk (a fixed-length token-id array) as one document
and token ids as terms; there is no text normalization of any kind. Scoring
uses the Okapi formulation with the smoothed, non-negative idf

    idf(t) = ln(1 + (n - df(t) + 0.5) / (df(t) + 0.5))

and the usual saturation/length components with ``k1 = 1.2``, ``b = 0.75``.
Queries are multisets: a term occurring twice in the query contributes its
per-term score twice.

Candidate generation for a query chunk scores only the chunks in its
retrievable set and keeps the ``n_cand`` best, breaking score ties toward the
lower (earlier) chunk index.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

K1 = 1.2
B = 0.75

CANDIDATES_FORMAT = "bm25-candidates"
CANDIDATES_VERSION = 1


@dataclass
class Bm25Index:
    """Term statistics for a list of chunks.

    ``term_freqs[i]`` maps token id -> count within chunk ``i``; ``doc_freq``
    maps token id -> number of chunks containing it. ``lengths[i]`` is the
    chunk length in tokens (chunks are normally all ``m`` long, but the index
    does not rely on that).
    """

    term_freqs: list[Counter]
    doc_freq: Counter
    lengths: list[int]
    avg_len: float

    @property
    def n_chunks(self) -> int:
        return len(self.term_freqs)

    def idf(self, term: int) -> float:
        df = self.doc_freq.get(term, 0)
        n = self.n_chunks
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def build_index(chunks: Sequence[np.ndarray]) -> Bm25Index:
    """Build a BM25 index over chunk token arrays."""
    if len(chunks) == 0:
        raise ValueError("cannot index zero chunks")
    term_freqs = [Counter(int(t) for t in chunk) for chunk in chunks]
    doc_freq: Counter = Counter()
    for tf in term_freqs:
        doc_freq.update(tf.keys())
    lengths = [len(chunk) for chunk in chunks]
    avg_len = sum(lengths) / len(lengths)
    return Bm25Index(term_freqs=term_freqs, doc_freq=doc_freq, lengths=lengths, avg_len=avg_len)


def bm25_score(index: Bm25Index, query_terms: Sequence[int], chunk: int) -> float:
    """Okapi BM25 score of ``chunk`` for a query term multiset."""
    if not 0 <= chunk < index.n_chunks:
        raise IndexError(f"chunk {chunk} out of range [0, {index.n_chunks})")
    tf = index.term_freqs[chunk]
    norm = K1 * (1.0 - B + B * index.lengths[chunk] / index.avg_len)
    score = 0.0
    for term, q_count in Counter(int(t) for t in query_terms).items():
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += q_count * index.idf(term) * f * (K1 + 1.0) / (f + norm)
    return score


def top_candidates(
    index: Bm25Index, query_terms: Sequence[int], allowed: Iterable[int], n_cand: int
) -> list[tuple[int, float]]:
    """The ``n_cand`` best-scoring chunks among ``allowed``.

    Sorted by score descending; ties broken toward the lower chunk index.
    Zero-score chunks are kept (the pool is defined by rank, not by score).
    """
    if n_cand < 1:
        raise ValueError(f"n_cand must be >= 1, got {n_cand}")
    scored = [(j, bm25_score(index, query_terms, j)) for j in allowed]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:n_cand]


def token_overlap(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of distinct token ids occurring in both sequences."""
    return len({int(t) for t in a} & {int(t) for t in b})


# ---------------------------------------------------------------------------
# candidate-set container and i/o
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSet:
    """BM25 candidates for one query chunk: ``(chunk_index, score)`` pairs in
    rank order."""

    doc_id: str
    query_index: int
    items: tuple[tuple[int, float], ...]

    def indices(self) -> list[int]:
        return [j for j, _ in self.items]


def write_candidates(sets: Iterable[CandidateSet], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": CANDIDATES_FORMAT, "version": CANDIDATES_VERSION}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for cs in sets:
            row = {
                "doc_id": cs.doc_id,
                "query_index": cs.query_index,
                "candidates": [[j, s] for j, s in cs.items],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_candidates(path: str | Path) -> list[CandidateSet]:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"empty candidates file: {path}")
    header = json.loads(lines[0])
    if header.get("format") != CANDIDATES_FORMAT:
        raise ValueError(f"not a candidates file: {path}")
    if header.get("version") != CANDIDATES_VERSION:
        raise ValueError(f"unsupported candidates version {header.get('version')}")
    out = []
    for line in lines[1:]:
        row = json.loads(line)
        out.append(
            CandidateSet(
                doc_id=row["doc_id"],
                query_index=int(row["query_index"]),
                items=tuple((int(j), float(s)) for j, s in row["candidates"]),
            )
        )
    return out
