"""Evaluation: language-model quality, retriever quality, and analyses.

Perplexity streams each document through the same sliding-window forward
used in training (dropout off, gradients off) and exponentiates the mean
next-token NLL over all predicted positions.

Retriever quality is measured over each supervision record's candidate
pool: the learned scores (or, for the lexical baseline, BM25 re-run with
the inference-time query — the query chunk alone, since the target chunk
does not exist yet at inference) rank the pool, and the ranking is compared
against the record's approved set and supervision scores via precision,
recall, and NDCG at fixed cutoffs. Records whose approved set is empty have
no right answer and are excluded from the averages (counts are reported).

Analyses mirror the training story: the distribution of per-chunk relative
NLL improvement against a no-retrieval baseline, that improvement split by
whether an approved neighbor was actually retrieved, token-overlap profiles
of the top retrieved neighbor, and the best achievable supervision score
within the top-k BM25 candidates as k grows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from . import lexical
from .corpus import ChunkPartition, Document, partition
from .modeling import ForwardOutput, SelfRetroModel, default_source, run_document
from .supervision import SupervisionRecord

REPORT_VERSION = 1
DEFAULT_KS = (2, 10, 20)


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoldLabels:
    """What a ranking is judged against: the approved candidates and the
    supervision scores turned into NDCG gains (clamped at zero)."""

    query_index: int
    positives: frozenset[int]
    gains: dict[int, float]

    @classmethod
    def from_record(cls, record: SupervisionRecord) -> "GoldLabels":
        return cls(
            query_index=record.query_index,
            positives=record.positive_set(),
            gains={j: max(s, 0.0) for j, s in zip(record.candidates, record.scores)},
        )


def precision_recall_at_k(
    ranking: Sequence[int], positives: frozenset[int] | set[int], k: int
) -> tuple[float, float]:
    """Fraction of the top-k that is approved, and of the approved set that
    is in the top-k. ``(0, 0)`` when there are no positives."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not positives:
        return 0.0, 0.0
    hits = sum(1 for j in ranking[:k] if j in positives)
    return hits / k, hits / len(positives)


def ndcg_at_k(ranking: Sequence[int], gains: Mapping[int, float], k: int) -> float:
    """Discounted cumulative gain of the top-k against the ideal ordering of
    the same items; 0 when the ideal is 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dcg = sum(gains.get(j, 0.0) / math.log2(r + 2) for r, j in enumerate(ranking[:k]))
    ideal = sorted((gains.get(j, 0.0) for j in ranking), reverse=True)
    idcg = sum(g / math.log2(r + 2) for r, g in enumerate(ideal[:k]))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def rank_candidates(candidates: Sequence[int], scores: Sequence[float]) -> list[int]:
    """Candidates by score descending, ties toward the lower chunk index."""
    return [j for j, _ in sorted(zip(candidates, scores), key=lambda p: (-p[1], p[0]))]


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------


def document_outputs(
    model: SelfRetroModel,
    docs: Sequence[Document],
    *,
    records: Optional[dict[str, dict[int, SupervisionRecord]]] = None,
    source: Optional[str] = None,
    forced: Optional[dict[str, dict[int, tuple[int, ...]]]] = None,
    k_neighbors: Optional[int] = None,
    collect_ret_scores: bool = False,
) -> list[ForwardOutput]:
    """Deterministic forward of every document (eval mode, no gradients)."""
    records = records or {}
    forced = forced or {}
    was_training = model.training
    model.eval()
    outs = []
    try:
        with torch.no_grad():
            for doc in docs:
                outs.append(
                    run_document(
                        model,
                        doc.tokens,
                        source=source,
                        records=records.get(doc.doc_id, {}),
                        forced_neighbors=forced.get(doc.doc_id),
                        k_neighbors=k_neighbors,
                        collect_positions=True,
                        collect_ret_scores=collect_ret_scores,
                    )
                )
    finally:
        model.train(was_training)
    return outs


def perplexity_of(outputs: Sequence[ForwardOutput]) -> float:
    total = sum(float(o.nll_sum) for o in outputs)
    n = sum(o.n_positions for o in outputs)
    if n == 0:
        raise ValueError("no predicted positions")
    return math.exp(total / n)


def perplexity(model: SelfRetroModel, docs: Sequence[Document], **kwargs) -> float:
    return perplexity_of(document_outputs(model, docs, **kwargs))


def oracle_eval(
    model: SelfRetroModel,
    docs: Sequence[Document],
    records: dict[str, dict[int, SupervisionRecord]],
    k_neighbors: Optional[int] = None,
) -> float:
    """Perplexity with neighbors forced to each record's approved-best list.

    Query chunks without a record (or with an empty approved set) fall back
    to the zero neighbor block.
    """
    k = k_neighbors if k_neighbors is not None else model.config.k_neighbors
    forced = {
        doc_id: {q: rec.oracle_neighbors(k) for q, rec in by_q.items()}
        for doc_id, by_q in records.items()
    }
    return perplexity(model, docs, source="forced", forced=forced, k_neighbors=k_neighbors)


def chunk_mean_nll(out: ForwardOutput, m: int) -> np.ndarray:
    """Per-chunk mean NLL for chunks ``1 .. n_chunks-1`` (chunk 0 is only
    partially predicted and is skipped)."""
    if out.position_nll is None:
        raise ValueError("forward output lacks per-position NLLs")
    vals = []
    for c in range(1, out.n_chunks):
        lo, hi = c * m - 1, (c + 1) * m - 1
        vals.append(float(out.position_nll[lo:hi].mean()))
    return np.asarray(vals)


# ---------------------------------------------------------------------------
# retrieval evaluation
# ---------------------------------------------------------------------------


def learned_rankings(
    model: SelfRetroModel,
    docs: Sequence[Document],
    records: dict[str, dict[int, SupervisionRecord]],
) -> dict[tuple[str, int], list[int]]:
    """Candidate-pool rankings by the learned retriever, per record."""
    outs = document_outputs(
        model, docs, records=records, source="self", collect_ret_scores=True
    )
    rankings: dict[tuple[str, int], list[int]] = {}
    for doc, out in zip(docs, outs):
        for record, scores in out.ret_scores:
            ranking = rank_candidates(record.candidates, [float(s) for s in scores])
            rankings[(doc.doc_id, record.query_index)] = ranking
    return rankings


def bm25_inference_rankings(
    parts: Mapping[str, ChunkPartition],
    records: dict[str, dict[int, SupervisionRecord]],
    w: int,
) -> dict[tuple[str, int], list[int]]:
    """Candidate-pool rankings by BM25 with the inference-time query (the
    query chunk's tokens only)."""
    rankings: dict[tuple[str, int], list[int]] = {}
    for doc_id, by_q in records.items():
        part = parts.get(doc_id)
        if part is None:
            continue
        for q, rec in by_q.items():
            chunks = [part.chunk_tokens(j) for j in range(q - w + 1)]
            index = lexical.build_index(chunks)
            query = list(part.chunk_tokens(q))
            scores = [lexical.bm25_score(index, query, j) for j in rec.candidates]
            rankings[(doc_id, q)] = rank_candidates(rec.candidates, scores)
    return rankings


def retrieval_report(
    rankings: Mapping[tuple[str, int], Sequence[int]],
    records: dict[str, dict[int, SupervisionRecord]],
    ks: Sequence[int] = DEFAULT_KS,
) -> dict:
    """Mean P@k / R@k / NDCG@k (graded and binary gains) over records with a
    non-empty approved set."""
    sums: dict[str, float] = {}
    n_scored = 0
    n_total = 0
    for doc_id, by_q in records.items():
        for q, rec in by_q.items():
            n_total += 1
            key = (doc_id, q)
            if key not in rankings:
                continue
            gold = GoldLabels.from_record(rec)
            if not gold.positives:
                continue
            n_scored += 1
            ranking = rankings[key]
            binary = {j: 1.0 if j in gold.positives else 0.0 for j in rec.candidates}
            for k in ks:
                p, r = precision_recall_at_k(ranking, gold.positives, k)
                sums[f"p@{k}"] = sums.get(f"p@{k}", 0.0) + p
                sums[f"r@{k}"] = sums.get(f"r@{k}", 0.0) + r
                sums[f"ndcg@{k}"] = sums.get(f"ndcg@{k}", 0.0) + ndcg_at_k(ranking, gold.gains, k)
                sums[f"ndcg_bin@{k}"] = sums.get(f"ndcg_bin@{k}", 0.0) + ndcg_at_k(
                    ranking, binary, k
                )
    metrics = {name: (val / n_scored if n_scored else 0.0) for name, val in sums.items()}
    return {
        "metrics": metrics,
        "n_records": n_total,
        "n_records_scored": n_scored,
        "pool": "record candidates (top BM25 at supervision time)",
    }


# ---------------------------------------------------------------------------
# analyses
# ---------------------------------------------------------------------------


def improvement_stats(
    baseline: np.ndarray, other: np.ndarray, n_bins: int = 20, lo: float = -1.0, hi: float = 1.0
) -> dict:
    """Distribution of per-chunk relative NLL improvement of ``other`` over
    ``baseline``: ``(baseline - other) / baseline``, positive = better."""
    if baseline.shape != other.shape:
        raise ValueError("improvement inputs must align")
    keep = baseline > 1e-9
    rel = (baseline[keep] - other[keep]) / baseline[keep]
    if rel.size == 0:
        raise ValueError("no chunks to compare")
    mu = float(rel.mean())
    sd = float(rel.std())
    skew = float((((rel - mu) ** 3).mean() / sd**3)) if sd > 0 else 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(np.clip(rel, lo, hi), bins=edges)
    return {
        "n_chunks": int(rel.size),
        "mean": mu,
        "median": float(np.median(rel)),
        "std": sd,
        "skew": skew,
        "frac_improved": float((rel > 0).mean()),
        "bin_edges": [float(e) for e in edges],
        "bin_counts": [int(c) for c in counts],
    }


def subgroup_stats(
    improvements: Mapping[tuple[str, int], float], hits: Mapping[tuple[str, int], bool]
) -> dict:
    """Mean relative improvement split by whether an approved neighbor was
    retrieved for the chunk's query."""
    groups: dict[str, list[float]] = {"approved_retrieved": [], "none_retrieved": []}
    for key, impr in improvements.items():
        if key not in hits:
            continue
        groups["approved_retrieved" if hits[key] else "none_retrieved"].append(impr)
    out = {}
    for name, vals in groups.items():
        out[name] = {
            "count": len(vals),
            "mean": float(np.mean(vals)) if vals else 0.0,
            "median": float(np.median(vals)) if vals else 0.0,
        }
    return out


def overlap_rows(
    parts: Mapping[str, ChunkPartition],
    records: dict[str, dict[int, SupervisionRecord]],
    rankings: Mapping[str, Mapping[tuple[str, int], Sequence[int]]],
) -> list[dict]:
    """Distinct-token overlap of each ranking source's top neighbor with the
    query chunk and with the target chunk, one row per record and source."""
    rows = []
    for doc_id, by_q in sorted(records.items()):
        part = parts.get(doc_id)
        if part is None:
            continue
        for q in sorted(by_q):
            query_toks = part.chunk_tokens(q)
            target_toks = part.chunk_tokens(q + 1)
            for source_name, source_rankings in rankings.items():
                ranking = source_rankings.get((doc_id, q))
                if not ranking:
                    continue
                top = ranking[0]
                rows.append(
                    {
                        "doc_id": doc_id,
                        "query_index": q,
                        "source": source_name,
                        "top_neighbor": top,
                        "query_overlap": lexical.token_overlap(part.chunk_tokens(top), query_toks),
                        "target_overlap": lexical.token_overlap(part.chunk_tokens(top), target_toks),
                    }
                )
    return rows


def gold_rankings(records: dict[str, dict[int, SupervisionRecord]]) -> dict[tuple[str, int], list[int]]:
    return {
        (doc_id, q): list(rec.gold_ranking())
        for doc_id, by_q in records.items()
        for q, rec in by_q.items()
    }


# ---------------------------------------------------------------------------
# report container and file output
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    ppl: float
    n_docs: int
    n_positions: int
    mode: str
    source: str
    retrieval: Optional[dict] = None
    bm25_retrieval: Optional[dict] = None
    oracle_ppl: Optional[float] = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        return d


def write_report(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def evaluate(
    model: SelfRetroModel,
    docs: Sequence[Document],
    *,
    records: Optional[dict[str, dict[int, SupervisionRecord]]] = None,
    source: Optional[str] = None,
    k_neighbors: Optional[int] = None,
) -> EvalReport:
    """Perplexity plus (when records are given and the mode retrieves)
    retrieval metrics for the learned scorer and the BM25 inference baseline."""
    outs = document_outputs(model, docs, records=records, source=source, k_neighbors=k_neighbors)
    ppl = perplexity_of(outs)
    report = EvalReport(
        ppl=ppl,
        n_docs=len(docs),
        n_positions=sum(o.n_positions for o in outs),
        mode=model.config.mode,
        source=source if source is not None else default_source(model.config.mode),
    )
    if records:
        parts = {d.doc_id: partition(d, model.config.m) for d in docs}
        if model.config.mode == "rpt":
            learned = learned_rankings(model, docs, records)
            report.retrieval = retrieval_report(learned, records)
        bm25_rank = bm25_inference_rankings(parts, records, model.config.w)
        report.bm25_retrieval = retrieval_report(bm25_rank, records)
        report.notes.append(
            "retrieval metrics are over each record's stored candidate pool; "
            "the BM25 ranking uses the inference-time (query-only) query"
        )
    return report


# ---------------------------------------------------------------------------
# csv output for the analyses
# ---------------------------------------------------------------------------


def write_overlap_csv(rows: Iterable[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = ["doc_id", "query_index", "source", "top_neighbor", "query_overlap", "target_overlap"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_improvement_csv(stats: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        edges = stats["bin_edges"]
        for i, count in enumerate(stats["bin_counts"]):
            writer.writerow([edges[i], edges[i + 1], count])
        writer.writerow([])
        for key in ("n_chunks", "mean", "median", "std", "skew", "frac_improved"):
            writer.writerow([key, stats[key], ""])


def write_subgroup_csv(stats: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subgroup", "count", "mean_rel_improvement", "median_rel_improvement"])
        for name, vals in stats.items():
            writer.writerow([name, vals["count"], vals["mean"], vals["median"]])


def write_max_target_csv(curve: Sequence[tuple[int, float]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "mean_max_target_score"])
        for k, val in curve:
            writer.writerow([k, val])
