"""Ranking metrics, perplexity bookkeeping, analyses, and report files."""

import csv
import json
import math

import numpy as np
import pytest
import torch

from selfretro import lexical
from selfretro.corpus import Document, partition
from selfretro.evaluation import (
    DEFAULT_KS,
    EvalReport,
    GoldLabels,
    bm25_inference_rankings,
    chunk_mean_nll,
    document_outputs,
    evaluate,
    gold_rankings,
    improvement_stats,
    learned_rankings,
    ndcg_at_k,
    oracle_eval,
    overlap_rows,
    perplexity,
    perplexity_of,
    precision_recall_at_k,
    rank_candidates,
    retrieval_report,
    subgroup_stats,
    write_improvement_csv,
    write_max_target_csv,
    write_overlap_csv,
    write_report,
    write_subgroup_csv,
)
from selfretro.modeling import ForwardOutput, SelfRetroModel, desk_config
from selfretro.supervision import SupervisionRecord


def fresh_model(mode="rpt", seed=0, **overrides):
    overrides.setdefault("dropout", 0.0)
    cfg = desk_config(mode=mode, **overrides)
    torch.manual_seed(seed)
    model = SelfRetroModel(cfg)
    model.eval()
    return model


def rand_docs(seed=0, lengths=(80, 96)):
    rng = np.random.default_rng(seed)
    return [
        Document(f"doc_{i}", rng.integers(0, 256, size=n).astype(np.int64))
        for i, n in enumerate(lengths)
    ]


def toy_records(docs, m=8):
    """Two hand-made records per document at eligible query chunks."""
    records = {}
    for doc in docs:
        by_q = {}
        for q in (3, 5):
            by_q[q] = SupervisionRecord(
                doc.doc_id, q, (0, 1), (0.0, 0.0), (0.3, -0.1), (0,)
            )
        records[doc.doc_id] = by_q
    return records


# ---------------------------------------------------------------------------
# precision / recall / ndcg
# ---------------------------------------------------------------------------


def test_precision_recall_hand_cases():
    positives = frozenset({1, 2})
    assert precision_recall_at_k([3, 1, 2], positives, 1) == (0.0, 0.0)
    assert precision_recall_at_k([3, 1, 2], positives, 2) == (0.5, 0.5)
    assert precision_recall_at_k([3, 1, 2], positives, 3) == (2 / 3, 1.0)
    # k past the end of the ranking just sees fewer items
    assert precision_recall_at_k([1], positives, 4) == (0.25, 0.5)


def test_precision_recall_edge_cases():
    assert precision_recall_at_k([1, 2, 3], frozenset(), 2) == (0.0, 0.0)
    with pytest.raises(ValueError, match="k must be"):
        precision_recall_at_k([1], frozenset({1}), 0)


def test_precision_recall_matches_set_arithmetic():
    rng = np.random.default_rng(7)
    for _ in range(30):
        n = int(rng.integers(1, 12))
        pool = [int(j) for j in rng.choice(50, size=n, replace=False)]
        ranking = list(pool)
        rng.shuffle(ranking)
        n_pos = int(rng.integers(1, n + 1))
        positives = frozenset(rng.choice(pool, size=n_pos, replace=False).tolist())
        k = int(rng.integers(1, 15))
        hits = len(set(ranking[:k]) & positives)
        p, r = precision_recall_at_k(ranking, positives, k)
        assert p == pytest.approx(hits / k)
        assert r == pytest.approx(hits / len(positives))


def test_ndcg_hand_case():
    gains = {0: 3.0, 1: 1.0, 2: 2.0}
    got = ndcg_at_k([2, 0, 1], gains, 3)
    dcg = 2.0 / math.log2(2) + 3.0 / math.log2(3) + 1.0 / math.log2(4)
    idcg = 3.0 / math.log2(2) + 2.0 / math.log2(3) + 1.0 / math.log2(4)
    assert got == pytest.approx(dcg / idcg, abs=1e-12)
    # the ideal ordering of the same items scores exactly 1
    assert ndcg_at_k([0, 2, 1], gains, 3) == pytest.approx(1.0, abs=1e-12)


def test_ndcg_edge_cases():
    assert ndcg_at_k([0, 1], {0: 0.0, 1: 0.0}, 2) == 0.0
    # the ideal is built from the items actually ranked, not from all gains
    assert ndcg_at_k([0], {0: 1.0, 9: 5.0}, 5) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="k must be"):
        ndcg_at_k([0], {0: 1.0}, 0)


def test_ndcg_bounded_and_maximal_for_sorted_ranking():
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(1, 10))
        items = [int(j) for j in rng.choice(40, size=n, replace=False)]
        gains = {j: float(g) for j, g in zip(items, rng.uniform(0, 2, size=n))}
        ranking = list(items)
        rng.shuffle(ranking)
        k = int(rng.integers(1, 12))
        val = ndcg_at_k(ranking, gains, k)
        assert 0.0 <= val <= 1.0 + 1e-12
        best = sorted(items, key=lambda j: (-gains[j], j))
        if any(g > 0 for g in gains.values()):
            assert ndcg_at_k(best, gains, k) == pytest.approx(1.0, abs=1e-12)


def test_rank_candidates_sorts_and_breaks_ties_low():
    assert rank_candidates([5, 3, 9], [1.0, 2.0, 0.5]) == [3, 5, 9]
    assert rank_candidates([7, 2, 4], [1.0, 1.0, 1.0]) == [2, 4, 7]
    assert rank_candidates([], []) == []


def test_gold_labels_clamp_negative_scores():
    rec = SupervisionRecord("d", 5, (0, 1, 2), (0.0, 0.0, 0.0), (0.7, -0.4, 0.0), (0,))
    gold = GoldLabels.from_record(rec)
    assert gold.positives == frozenset({0})
    assert gold.gains == {0: 0.7, 1: 0.0, 2: 0.0}


# ---------------------------------------------------------------------------
# perplexity bookkeeping
# ---------------------------------------------------------------------------


def test_perplexity_of_hand_values():
    outs = [
        ForwardOutput(nll_sum=torch.tensor(2.0), n_positions=2, n_chunks=1),
        ForwardOutput(nll_sum=torch.tensor(4.0), n_positions=2, n_chunks=1),
    ]
    assert perplexity_of(outs) == pytest.approx(math.exp(6.0 / 4.0))
    with pytest.raises(ValueError, match="no predicted positions"):
        perplexity_of([ForwardOutput(nll_sum=torch.tensor(0.0), n_positions=0, n_chunks=0)])


def test_chunk_mean_nll_slices_per_chunk():
    # 12 tokens, m=4 -> 11 predicted positions, chunks 1 and 2 measurable
    out = ForwardOutput(
        nll_sum=torch.tensor(0.0),
        n_positions=11,
        n_chunks=3,
        position_nll=np.arange(11, dtype=np.float64),
    )
    vals = chunk_mean_nll(out, m=4)
    assert vals.shape == (2,)
    assert vals[0] == pytest.approx(np.mean([3, 4, 5, 6]))
    assert vals[1] == pytest.approx(np.mean([7, 8, 9, 10]))


def test_chunk_mean_nll_requires_positions():
    out = ForwardOutput(nll_sum=torch.tensor(0.0), n_positions=3, n_chunks=2)
    with pytest.raises(ValueError, match="per-position"):
        chunk_mean_nll(out, m=4)


def test_document_outputs_restores_training_flag():
    model = fresh_model(mode="txl")
    docs = rand_docs(lengths=(40,))
    model.train()
    outs = document_outputs(model, docs)
    assert model.training
    assert len(outs) == 1
    assert outs[0].position_nll is not None
    # and the helper agrees with recomputing the mean by hand
    ppl = perplexity(model, docs)
    total = float(outs[0].nll_sum)
    assert ppl == pytest.approx(math.exp(total / outs[0].n_positions))


# ---------------------------------------------------------------------------
# improvement distribution and subgroup split
# ---------------------------------------------------------------------------


def test_improvement_stats_known_values():
    baseline = np.array([1.0, 2.0, 4.0])
    other = np.array([0.5, 2.0, 5.0])
    stats = improvement_stats(baseline, other)
    rel = np.array([0.5, 0.0, -0.25])
    assert stats["n_chunks"] == 3
    assert stats["mean"] == pytest.approx(rel.mean())
    assert stats["median"] == pytest.approx(0.0)
    assert stats["std"] == pytest.approx(rel.std())
    mu, sd = rel.mean(), rel.std()
    assert stats["skew"] == pytest.approx(((rel - mu) ** 3).mean() / sd**3)
    assert stats["frac_improved"] == pytest.approx(1 / 3)
    assert len(stats["bin_edges"]) == 21
    assert sum(stats["bin_counts"]) == 3


def test_improvement_stats_skips_degenerate_baseline_chunks():
    baseline = np.array([0.0, 1.0])
    other = np.array([9.9, 0.5])
    stats = improvement_stats(baseline, other)
    assert stats["n_chunks"] == 1
    assert stats["mean"] == pytest.approx(0.5)


def test_improvement_stats_errors():
    with pytest.raises(ValueError, match="align"):
        improvement_stats(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="no chunks"):
        improvement_stats(np.zeros(3), np.ones(3))


def test_subgroup_stats_split():
    improvements = {("a", 3): 0.2, ("a", 5): -0.1, ("b", 4): 0.4, ("b", 6): 1.0}
    hits = {("a", 3): True, ("a", 5): False, ("b", 4): True}  # ("b", 6) unknown
    stats = subgroup_stats(improvements, hits)
    assert stats["approved_retrieved"]["count"] == 2
    assert stats["approved_retrieved"]["mean"] == pytest.approx(0.3)
    assert stats["none_retrieved"]["count"] == 1
    assert stats["none_retrieved"]["mean"] == pytest.approx(-0.1)


def test_subgroup_stats_empty_groups_report_zero():
    stats = subgroup_stats({}, {})
    for name in ("approved_retrieved", "none_retrieved"):
        assert stats[name] == {"count": 0, "mean": 0.0, "median": 0.0}


# ---------------------------------------------------------------------------
# retrieval report
# ---------------------------------------------------------------------------


def test_retrieval_report_counts_and_values():
    rec1 = SupervisionRecord("a", 5, (0, 1, 2), (0.0,) * 3, (1.0, 0.5, -0.2), (0, 1))
    rec2 = SupervisionRecord("a", 7, (0, 1), (0.0,) * 2, (-1.0, -2.0), ())
    rec3 = SupervisionRecord("b", 4, (0,), (0.0,), (0.5,), (0,))
    records = {"a": {5: rec1, 7: rec2}, "b": {4: rec3}}
    rankings = {("a", 5): [2, 0, 1], ("a", 7): [0, 1]}  # rec3 never ranked

    report = retrieval_report(rankings, records)
    assert report["n_records"] == 3
    assert report["n_records_scored"] == 1  # rec2 has no positives, rec3 no ranking

    l3 = math.log2(3)
    m = report["metrics"]
    assert set(m) == {f"{name}@{k}" for name in ("p", "r", "ndcg", "ndcg_bin") for k in DEFAULT_KS}
    assert m["p@2"] == pytest.approx(0.5)
    assert m["r@2"] == pytest.approx(0.5)
    assert m["p@10"] == pytest.approx(2 / 10)
    assert m["r@10"] == pytest.approx(1.0)
    assert m["p@20"] == pytest.approx(2 / 20)
    assert m["ndcg@2"] == pytest.approx((1.0 / l3) / (1.0 + 0.5 / l3), abs=1e-12)
    assert m["ndcg@10"] == pytest.approx((1.0 / l3 + 0.5 / 2.0) / (1.0 + 0.5 / l3), abs=1e-12)
    assert m["ndcg_bin@2"] == pytest.approx((1.0 / l3) / (1.0 + 1.0 / l3), abs=1e-12)
    assert m["ndcg_bin@10"] == pytest.approx((1.0 / l3 + 0.5) / (1.0 + 1.0 / l3), abs=1e-12)


def test_retrieval_report_all_unscored_is_zeroed():
    rec = SupervisionRecord("a", 5, (0, 1), (0.0, 0.0), (-1.0, -2.0), ())
    report = retrieval_report({("a", 5): [0, 1]}, {"a": {5: rec}})
    assert report["n_records_scored"] == 0
    assert report["metrics"] == {}


def test_gold_rankings_mirror_records():
    rec1 = SupervisionRecord("a", 5, (0, 1, 2), (0.0,) * 3, (0.1, 0.7, 0.1), (0, 1, 2))
    rec2 = SupervisionRecord("b", 4, (3, 4), (0.0,) * 2, (-0.5, 0.2), (4,))
    got = gold_rankings({"a": {5: rec1}, "b": {4: rec2}})
    assert got == {("a", 5): [1, 0, 2], ("b", 4): [4, 3]}


# ---------------------------------------------------------------------------
# ranking sources over real partitions / models
# ---------------------------------------------------------------------------


def make_mirror_partition(q=6, m=8, n_chunks=10):
    """A partition where chunk 0 is an exact copy of the query chunk."""
    toks = np.zeros(n_chunks * m, dtype=np.int64)
    for c in range(n_chunks):
        toks[c * m : (c + 1) * m] = 100 + np.arange(c * m, (c + 1) * m) % 150
    toks[0:m] = toks[q * m : (q + 1) * m]
    doc = Document("mirror", toks)
    return doc, partition(doc, m)


def test_bm25_inference_rankings_prefer_lexical_match():
    q = 6
    doc, part = make_mirror_partition(q=q)
    rec = SupervisionRecord(doc.doc_id, q, (0, 1, 2), (0.0,) * 3, (0.1, 0.0, 0.0), (0,))
    rankings = bm25_inference_rankings({doc.doc_id: part}, {doc.doc_id: {q: rec}}, w=2)
    assert rankings[(doc.doc_id, q)] == [0, 1, 2]  # copy first, ties by index


def test_bm25_inference_rankings_skip_unknown_documents():
    rec = SupervisionRecord("ghost", 6, (0, 1), (0.0, 0.0), (0.1, 0.0), (0,))
    assert bm25_inference_rankings({}, {"ghost": {6: rec}}, w=2) == {}


def test_learned_rankings_are_candidate_permutations():
    model = fresh_model(mode="rpt")
    docs = rand_docs()
    records = toy_records(docs)
    rankings = learned_rankings(model, docs, records)
    expected_keys = {(d.doc_id, q) for d in docs for q in (3, 5)}
    assert set(rankings) == expected_keys
    for (doc_id, q), ranking in rankings.items():
        assert sorted(ranking) == sorted(records[doc_id][q].candidates)


def test_overlap_rows_values_and_skips():
    q = 6
    doc, part = make_mirror_partition(q=q)
    rec = SupervisionRecord(doc.doc_id, q, (0, 1, 2), (0.0,) * 3, (0.1, 0.0, 0.0), (0,))
    records = {doc.doc_id: {q: rec}, "missing": {4: rec}}
    sources = {"learned": {(doc.doc_id, q): [0, 1, 2]}, "gold": {}}
    rows = overlap_rows({doc.doc_id: part}, records, sources)
    assert len(rows) == 1  # unknown doc skipped, empty source skipped
    row = rows[0]
    assert (row["doc_id"], row["query_index"], row["source"], row["top_neighbor"]) == (
        doc.doc_id,
        q,
        "learned",
        0,
    )
    assert row["query_overlap"] == lexical.token_overlap(
        part.chunk_tokens(0), part.chunk_tokens(q)
    )
    assert row["target_overlap"] == lexical.token_overlap(
        part.chunk_tokens(0), part.chunk_tokens(q + 1)
    )
    assert row["query_overlap"] == 8  # chunk 0 mirrors the query chunk exactly


# ---------------------------------------------------------------------------
# oracle forcing and whole-report assembly
# ---------------------------------------------------------------------------


def test_oracle_eval_matches_manual_forcing():
    model = fresh_model(mode="rpt")
    docs = rand_docs()
    records = toy_records(docs)
    forced = {
        doc_id: {q: rec.oracle_neighbors(model.config.k_neighbors) for q, rec in by_q.items()}
        for doc_id, by_q in records.items()
    }
    direct = perplexity(model, docs, source="forced", forced=forced)
    assert oracle_eval(model, docs, records) == direct


def test_evaluate_txl_without_records():
    model = fresh_model(mode="txl")
    docs = rand_docs()
    report = evaluate(model, docs)
    assert report.mode == "txl"
    assert report.source == "none"
    assert report.n_docs == 2
    assert report.n_positions == sum(len(d.tokens) - 1 for d in docs)
    assert report.retrieval is None and report.bm25_retrieval is None
    assert report.oracle_ppl is None
    assert report.notes == []
    assert math.isfinite(report.ppl) and report.ppl > 0


def test_evaluate_txl_with_records_reports_bm25_only():
    model = fresh_model(mode="txl")
    docs = rand_docs()
    report = evaluate(model, docs, records=toy_records(docs))
    assert report.retrieval is None
    assert report.bm25_retrieval is not None
    assert report.bm25_retrieval["n_records"] == 4
    assert len(report.notes) == 1


def test_evaluate_rpt_reports_both_rankers():
    model = fresh_model(mode="rpt")
    docs = rand_docs()
    report = evaluate(model, docs, records=toy_records(docs))
    for block in (report.retrieval, report.bm25_retrieval):
        assert block is not None
        assert block["n_records"] == 4
        assert block["n_records_scored"] == 4
        assert set(block["metrics"]) == {
            f"{name}@{k}" for name in ("p", "r", "ndcg", "ndcg_bin") for k in DEFAULT_KS
        }
    assert report.source == "self"


def test_write_report_roundtrip(tmp_path):
    report = EvalReport(ppl=12.5, n_docs=3, n_positions=100, mode="rpt", source="self")
    report.oracle_ppl = 11.0
    path = tmp_path / "nested" / "report.json"
    write_report(report, path)
    data = json.loads(path.read_text())
    assert data["version"] == 1
    assert data["ppl"] == 12.5
    assert data["oracle_ppl"] == 11.0
    assert data["notes"] == []
    assert path.read_text().endswith("\n")


# ---------------------------------------------------------------------------
# csv writers
# ---------------------------------------------------------------------------


def test_overlap_csv_roundtrip(tmp_path):
    rows = [
        {
            "doc_id": "a",
            "query_index": 5,
            "source": "learned",
            "top_neighbor": 2,
            "query_overlap": 3,
            "target_overlap": 1,
        }
    ]
    path = tmp_path / "overlap.csv"
    write_overlap_csv(rows, path)
    with path.open() as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == 1
    assert got[0]["doc_id"] == "a"
    assert int(got[0]["top_neighbor"]) == 2
    assert int(got[0]["target_overlap"]) == 1


def test_improvement_csv_roundtrip(tmp_path):
    stats = improvement_stats(np.array([1.0, 2.0, 4.0]), np.array([0.5, 2.0, 5.0]))
    path = tmp_path / "improvement.csv"
    write_improvement_csv(stats, path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_lo", "bin_hi", "count"]
    bin_rows = rows[1 : 1 + len(stats["bin_counts"])]
    assert len(bin_rows) == 20
    assert sum(int(r[2]) for r in bin_rows) == stats["n_chunks"]
    tail = {r[0]: r[1] for r in rows if r and r[0] in ("mean", "n_chunks")}
    assert float(tail["mean"]) == pytest.approx(stats["mean"])
    assert int(tail["n_chunks"]) == 3


def test_subgroup_csv_roundtrip(tmp_path):
    stats = subgroup_stats({("a", 3): 0.2, ("a", 5): -0.1}, {("a", 3): True, ("a", 5): False})
    path = tmp_path / "subgroup.csv"
    write_subgroup_csv(stats, path)
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    by_name = {r["subgroup"]: r for r in rows}
    assert float(by_name["approved_retrieved"]["mean_rel_improvement"]) == pytest.approx(0.2)
    assert int(by_name["none_retrieved"]["count"]) == 1


def test_max_target_csv_roundtrip(tmp_path):
    path = tmp_path / "curve.csv"
    write_max_target_csv([(1, 0.5), (2, 0.75)], path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "mean_max_target_score"]
    assert [int(rows[1][0]), float(rows[1][1])] == [1, 0.5]
    assert [int(rows[2][0]), float(rows[2][1])] == [2, 0.75]
