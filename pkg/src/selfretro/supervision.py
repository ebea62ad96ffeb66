"""Retrieval supervision from a reference scoring LM.

For an eligible query chunk ``q`` (0-based: ``w+1 <= q <= n_chunks-2``, so it
has a target chunk ``q+1``, a full two-chunk local context, and a non-trivial
retrievable set), BM25 proposes ``n_cand`` candidate chunks using the
concatenated query+target tokens, and a frozen reference LM judges how much
each candidate would help predict the target beyond the local context:

    score(j) = log P(c_{q+1} | c_j, c_{j+1}, c_q) - log P(c_{q+1} | c_{q-2}, c_{q-1}, c_q)

Candidates with positive score form the approved set; ranking candidates by
score (ties toward the lower chunk index) gives the gold ordering used both
for the ranking loss and for teacher-forced neighbors. The lexical flavor
replaces reference-LM scores with the BM25 scores themselves and approves
the top half of the candidate list.

The reference scorer is pluggable: in-process (a trained checkpoint or a
uniform calibration scorer) or out-of-process through a versioned
request/response JSONL protocol.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch

from . import lexical
from .corpus import ChunkPartition
from .lexical import CandidateSet
from .modeling import SelfRetroModel, run_document

RECORDS_FORMAT = "supervision-records"
RECORDS_VERSION = 1
REQUESTS_FORMAT = "score-requests"
RESPONSES_FORMAT = "score-responses"
PROTOCOL_VERSION = 1

DEFAULT_N_CAND = 20
LEX_POSITIVE_FRACTION = 0.5


# ---------------------------------------------------------------------------
# scoring providers
# ---------------------------------------------------------------------------


class ScoringProvider(Protocol):
    """Anything that can score continuations: returns total log-probability
    of ``continuation_ids`` after ``context_ids`` (finite, <= 0)."""

    name: str

    def log_prob(self, context_ids: Sequence[int], continuation_ids: Sequence[int]) -> float: ...

    def log_prob_batch(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> list[float]: ...


class UniformProvider:
    """Assigns every token probability ``1/vocab``; useful for calibration
    (every target score becomes exactly zero)."""

    def __init__(self, vocab_size: int = 256):
        self.vocab_size = vocab_size
        self.name = f"uniform:{vocab_size}"

    def log_prob(self, context_ids: Sequence[int], continuation_ids: Sequence[int]) -> float:
        return -len(continuation_ids) * math.log(self.vocab_size)

    def log_prob_batch(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> list[float]:
        return [self.log_prob(ctx, cont) for ctx, cont in pairs]


class ModelProvider:
    """Scores continuations with a trained model's pure decoder path
    (retrieval disabled regardless of the model's mode). Deterministic: the
    model is put in eval mode for the duration of each call."""

    def __init__(self, model: SelfRetroModel, name: str = "checkpoint", batch_rows: int = 64):
        self.model = model
        self.name = name
        self.batch_rows = batch_rows

    def log_prob(self, context_ids: Sequence[int], continuation_ids: Sequence[int]) -> float:
        return self.log_prob_batch([(context_ids, continuation_ids)])[0]

    def log_prob_batch(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> list[float]:
        if not pairs:
            return []
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.no_grad():
                return self._score(pairs)
        finally:
            self.model.train(was_training)

    def _score(self, pairs) -> list[float]:
        results: list[float] = []
        window = self.model.config.window_tokens
        i = 0
        while i < len(pairs):
            ctx0, cont0 = pairs[i]
            total = len(ctx0) + len(cont0)
            # group a run of same-length sequences into one batch
            j = i
            batch = []
            while (
                j < len(pairs)
                and len(pairs[j][0]) + len(pairs[j][1]) == total
                and len(pairs[j][0]) == len(ctx0)
                and j - i < self.batch_rows
            ):
                batch.append(pairs[j])
                j += 1
            if total <= window:
                toks = torch.tensor(
                    [list(c) + list(t) for c, t in batch], dtype=torch.long
                )
                logits = self.model.window_logits(toks)
                logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
                n_ctx = len(ctx0)
                for row, (ctx, cont) in enumerate(batch):
                    lp = 0.0
                    for k, tok in enumerate(cont):
                        lp += float(logp[row, n_ctx - 1 + k, tok])
                    results.append(lp)
            else:
                # longer than a window: stream it
                for ctx, cont in batch:
                    ids = np.asarray(list(ctx) + list(cont), dtype=np.int64)
                    fw = run_document(self.model, ids, source="none", collect_positions=True)
                    lp = -float(fw.position_nll[len(ctx) - 1 : len(ctx) - 1 + len(cont)].sum())
                    results.append(lp)
            i = j
        for lp in results:
            if not math.isfinite(lp) or lp > 1e-9:
                raise ValueError(f"provider produced an invalid log-probability: {lp}")
        return results


class ResponsesProvider:
    """Replays scores produced externally through the file protocol.

    Joined on request id, then keyed by content, so lookups do not depend on
    call order. Missing pairs raise ``KeyError``.
    """

    def __init__(self, requests_path: str | Path, responses_path: str | Path):
        requests = read_score_requests(requests_path)
        responses = read_score_responses(responses_path)
        by_id = {rid: lp for rid, lp in responses}
        self.table: dict[tuple, float] = {}
        for rid, ctx, cont in requests:
            if rid not in by_id:
                raise ValueError(f"no response for request id {rid}")
            self.table[(tuple(ctx), tuple(cont))] = by_id[rid]
        self.name = f"responses:{Path(responses_path).name}"

    def log_prob(self, context_ids: Sequence[int], continuation_ids: Sequence[int]) -> float:
        key = (tuple(int(t) for t in context_ids), tuple(int(t) for t in continuation_ids))
        if key not in self.table:
            raise KeyError("no scored response for this context/continuation pair")
        return self.table[key]

    def log_prob_batch(self, pairs) -> list[float]:
        return [self.log_prob(ctx, cont) for ctx, cont in pairs]


# ---------------------------------------------------------------------------
# score request/response files
# ---------------------------------------------------------------------------


def write_score_requests(pairs: Iterable[tuple[Sequence[int], Sequence[int]]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": REQUESTS_FORMAT, "version": PROTOCOL_VERSION}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rid, (ctx, cont) in enumerate(pairs):
            row = {
                "id": rid,
                "context_ids": [int(t) for t in ctx],
                "continuation_ids": [int(t) for t in cont],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_score_requests(path: str | Path) -> list[tuple[int, list[int], list[int]]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"empty request file: {path}")
    header = json.loads(lines[0])
    if header.get("format") != REQUESTS_FORMAT or header.get("version") != PROTOCOL_VERSION:
        raise ValueError(f"not a v{PROTOCOL_VERSION} score-request file: {path}")
    out = []
    for line in lines[1:]:
        row = json.loads(line)
        out.append((int(row["id"]), list(row["context_ids"]), list(row["continuation_ids"])))
    return out


def write_score_responses(scores: Iterable[tuple[int, float]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": RESPONSES_FORMAT, "version": PROTOCOL_VERSION}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rid, lp in scores:
            fh.write(json.dumps({"id": rid, "logprob": float(lp)}, sort_keys=True) + "\n")


def read_score_responses(path: str | Path) -> list[tuple[int, float]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"empty response file: {path}")
    header = json.loads(lines[0])
    if header.get("format") != RESPONSES_FORMAT or header.get("version") != PROTOCOL_VERSION:
        raise ValueError(f"not a v{PROTOCOL_VERSION} score-response file: {path}")
    return [(int(r["id"]), float(r["logprob"])) for r in (json.loads(l) for l in lines[1:])]


def serve_score_requests(provider: ScoringProvider, requests_path: str | Path, responses_path: str | Path) -> int:
    """Answer a request file with ``provider``; returns the number scored."""
    requests = read_score_requests(requests_path)
    scores = provider.log_prob_batch([(ctx, cont) for _, ctx, cont in requests])
    write_score_responses(zip((rid for rid, _, _ in requests), scores), responses_path)
    return len(requests)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupervisionRecord:
    """Scored retrieval candidates for one query chunk.

    ``candidates`` are chunk indices in BM25 rank order; ``bm25`` their
    lexical scores; ``scores`` the supervision scores (reference-LM score
    difference for the semantic flavor, BM25 again for the lexical one).
    """

    doc_id: str
    query_index: int
    candidates: tuple[int, ...]
    bm25: tuple[float, ...]
    scores: tuple[float, ...]
    positives: tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.candidates)
        if len(self.bm25) != n or len(self.scores) != n:
            raise ValueError("candidate/score length mismatch")
        if len(set(self.candidates)) != n:
            raise ValueError("duplicate candidate indices")
        if not set(self.positives) <= set(self.candidates):
            raise ValueError("positives must be a subset of candidates")

    def candidate_indices(self) -> tuple[int, ...]:
        return self.candidates

    def positive_set(self) -> frozenset[int]:
        return frozenset(self.positives)

    def score_of(self, j: int) -> float:
        return self.scores[self.candidates.index(j)]

    def gold_ranking(self) -> tuple[int, ...]:
        """Candidates by supervision score, descending; ties toward the
        lower chunk index."""
        pairs = sorted(zip(self.candidates, self.scores), key=lambda p: (-p[1], p[0]))
        return tuple(j for j, _ in pairs)

    def oracle_neighbors(self, k: int) -> tuple[int, ...]:
        """The ``k`` best approved candidates in gold order (may be shorter)."""
        pos = self.positive_set()
        return tuple(j for j in self.gold_ranking() if j in pos)[:k]


def eligible_query_range(n_chunks: int, w: int) -> range:
    """Query chunks that get supervision records: ``w+1 .. n_chunks-2``."""
    return range(w + 1, max(n_chunks - 1, w + 1))


def target_score(
    provider: ScoringProvider, part: ChunkPartition, query_index: int, candidate: int, w: int
) -> float:
    """Reference-LM usefulness of ``candidate`` for predicting the chunk
    after ``query_index``, relative to the local two-chunk context."""
    q, j = query_index, candidate
    if q not in eligible_query_range(part.n_chunks, w):
        raise ValueError(f"query chunk {q} is not eligible (n_chunks={part.n_chunks}, w={w})")
    if not 0 <= j <= q - w:
        raise ValueError(f"candidate {j} outside retrievable set of chunk {q}")
    target = list(part.chunk_tokens(q + 1))
    query = list(part.chunk_tokens(q))
    num_ctx = list(part.chunk_tokens(j)) + list(part.chunk_tokens(j + 1)) + query
    den_ctx = list(part.chunk_tokens(q - 2)) + list(part.chunk_tokens(q - 1)) + query
    lp_num, lp_den = provider.log_prob_batch([(num_ctx, target), (den_ctx, target)])
    return lp_num - lp_den


def bm25_candidates(
    part: ChunkPartition, query_index: int, w: int, n_cand: int = DEFAULT_N_CAND
) -> CandidateSet:
    """BM25 candidates for a query chunk with the query+target token query."""
    q = query_index
    hi = q - w
    if hi < 0:
        raise ValueError(f"chunk {q} has an empty retrievable set")
    chunks = [part.chunk_tokens(j) for j in range(hi + 1)]
    index = lexical.build_index(chunks)
    query = list(part.chunk_tokens(q))
    if q + 1 < part.n_chunks:
        query += list(part.chunk_tokens(q + 1))
    items = lexical.top_candidates(index, query, range(hi + 1), n_cand)
    return CandidateSet(doc_id=part.doc_id, query_index=q, items=tuple(items))


def score_pairs_for_record(
    part: ChunkPartition, query_index: int, candidates: Sequence[int]
) -> list[tuple[list[int], list[int]]]:
    """Provider request list for one record: one numerator context per
    candidate, then the shared denominator context, all with the target
    chunk as continuation."""
    q = query_index
    target = list(part.chunk_tokens(q + 1))
    query = list(part.chunk_tokens(q))
    pairs = []
    for j in candidates:
        ctx = list(part.chunk_tokens(j)) + list(part.chunk_tokens(j + 1)) + query
        pairs.append((ctx, target))
    pairs.append((list(part.chunk_tokens(q - 2)) + list(part.chunk_tokens(q - 1)) + query, target))
    return pairs


def build_record(
    provider: ScoringProvider,
    part: ChunkPartition,
    query_index: int,
    w: int,
    n_cand: int = DEFAULT_N_CAND,
    candidate_set: CandidateSet | None = None,
) -> SupervisionRecord:
    """Build a semantic-flavor record for one query chunk."""
    cs = candidate_set if candidate_set is not None else bm25_candidates(part, query_index, w, n_cand)
    cands = cs.indices()
    lps = provider.log_prob_batch(score_pairs_for_record(part, query_index, cands))
    den = lps[-1]
    scores = tuple(lp - den for lp in lps[:-1])
    positives = tuple(j for j, s in zip(cands, scores) if s > 0.0)
    return SupervisionRecord(
        doc_id=part.doc_id,
        query_index=query_index,
        candidates=tuple(cands),
        bm25=tuple(s for _, s in cs.items),
        scores=scores,
        positives=positives,
    )


def build_lex_record(
    part: ChunkPartition,
    query_index: int,
    w: int,
    n_cand: int = DEFAULT_N_CAND,
    candidate_set: CandidateSet | None = None,
    positive_fraction: float = LEX_POSITIVE_FRACTION,
) -> SupervisionRecord:
    """Lexical-flavor record: supervision scores are the BM25 scores and the
    approved set is the top ``positive_fraction`` of the candidate list."""
    cs = candidate_set if candidate_set is not None else bm25_candidates(part, query_index, w, n_cand)
    cands = cs.indices()
    bm25 = tuple(s for _, s in cs.items)
    n_pos = int(len(cands) * positive_fraction)
    return SupervisionRecord(
        doc_id=part.doc_id,
        query_index=query_index,
        candidates=tuple(cands),
        bm25=bm25,
        scores=bm25,
        positives=tuple(cands[:n_pos]),
    )


def build_records_for_partition(
    part: ChunkPartition,
    w: int,
    flavor: str = "sem",
    provider: ScoringProvider | None = None,
    n_cand: int = DEFAULT_N_CAND,
) -> list[SupervisionRecord]:
    """Records for every eligible query chunk of one document.

    Semantic flavor batches all provider requests for the document into one
    call (the provider may be remote); lexical flavor needs no provider.
    """
    qs = list(eligible_query_range(part.n_chunks, w))
    if not qs:
        return []
    cand_sets = {q: bm25_candidates(part, q, w, n_cand) for q in qs}
    if flavor == "lex":
        return [build_lex_record(part, q, w, n_cand, cand_sets[q]) for q in qs]
    if flavor != "sem":
        raise ValueError(f"unknown supervision flavor {flavor!r}")
    if provider is None:
        raise ValueError("semantic supervision requires a scoring provider")
    all_pairs: list[tuple[list[int], list[int]]] = []
    spans: list[tuple[int, int]] = []
    for q in qs:
        pairs = score_pairs_for_record(part, q, cand_sets[q].indices())
        spans.append((len(all_pairs), len(pairs)))
        all_pairs.extend(pairs)
    lps = provider.log_prob_batch(all_pairs)
    records = []
    for q, (start, count) in zip(qs, spans):
        cands = cand_sets[q].indices()
        chunk_lps = lps[start : start + count]
        den = chunk_lps[-1]
        scores = tuple(lp - den for lp in chunk_lps[:-1])
        positives = tuple(j for j, s in zip(cands, scores) if s > 0.0)
        records.append(
            SupervisionRecord(
                doc_id=part.doc_id,
                query_index=q,
                candidates=tuple(cands),
                bm25=tuple(s for _, s in cand_sets[q].items),
                scores=scores,
                positives=positives,
            )
        )
    return records


def max_target_at_k(records: Sequence[SupervisionRecord], k: int) -> float:
    """Mean over records of the best supervision score within the top ``k``
    BM25 candidates. Non-decreasing in ``k`` on every record."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not records:
        raise ValueError("no records")
    total = 0.0
    for rec in records:
        kk = min(k, len(rec.scores))
        if kk == 0:
            raise ValueError("record with zero candidates")
        total += max(rec.scores[:kk])
    return total / len(records)


def max_target_curve(records: Sequence[SupervisionRecord], ks: Sequence[int]) -> list[tuple[int, float]]:
    return [(k, max_target_at_k(records, k)) for k in ks]


# ---------------------------------------------------------------------------
# record files
# ---------------------------------------------------------------------------


def write_records(
    records: Iterable[SupervisionRecord], path: str | Path, *, flavor: str, w: int, m: int,
    n_cand: int, provider_name: str
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": RECORDS_FORMAT,
        "version": RECORDS_VERSION,
        "flavor": flavor,
        "w": w,
        "m": m,
        "n_cand": n_cand,
        "provider": provider_name,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            row = {
                "doc_id": rec.doc_id,
                "query_index": rec.query_index,
                "candidates": list(rec.candidates),
                "bm25": list(rec.bm25),
                "scores": list(rec.scores),
                "positives": list(rec.positives),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path: str | Path) -> tuple[dict, list[SupervisionRecord]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"empty records file: {path}")
    header = json.loads(lines[0])
    if header.get("format") != RECORDS_FORMAT:
        raise ValueError(f"not a supervision records file: {path}")
    if header.get("version") != RECORDS_VERSION:
        raise ValueError(f"unsupported records version {header.get('version')}")
    records = []
    for line in lines[1:]:
        row = json.loads(line)
        records.append(
            SupervisionRecord(
                doc_id=row["doc_id"],
                query_index=int(row["query_index"]),
                candidates=tuple(int(j) for j in row["candidates"]),
                bm25=tuple(float(s) for s in row["bm25"]),
                scores=tuple(float(s) for s in row["scores"]),
                positives=tuple(int(j) for j in row["positives"]),
            )
        )
    return header, records


def records_by_doc(records: Iterable[SupervisionRecord]) -> dict[str, dict[int, SupervisionRecord]]:
    """Group records as ``doc_id -> query_index -> record``."""
    grouped: dict[str, dict[int, SupervisionRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.doc_id, {})[rec.query_index] = rec
    return grouped
