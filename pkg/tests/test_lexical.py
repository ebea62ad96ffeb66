"""BM25 against an independently written brute-force scorer."""

import math
from collections import Counter

import numpy as np
import pytest

from selfretro.lexical import (
    CandidateSet,
    bm25_score,
    build_index,
    read_candidates,
    token_overlap,
    top_candidates,
    write_candidates,
)


def brute_force_bm25(chunks, query, j, k1=1.2, b=0.75):
    """Straight-from-the-formula reference: no index structure, no shortcuts."""
    n = len(chunks)
    lengths = [len(c) for c in chunks]
    avg = sum(lengths) / n
    score = 0.0
    for term in query:  # multiset: every occurrence contributes
        df = sum(1 for c in chunks if term in [int(t) for t in c])
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        f = sum(1 for t in chunks[j] if int(t) == term)
        if f > 0:
            score += idf * (f * (k1 + 1.0)) / (f + k1 * (1.0 - b + b * lengths[j] / avg))
    return score


def random_chunks(rng, n, m, vocab):
    return [rng.integers(0, vocab, size=m) for _ in range(n)]


def test_bm25_matches_brute_force_on_random_corpora():
    rng = np.random.default_rng(7)
    for trial in range(30):
        n = int(rng.integers(2, 12))
        m = int(rng.integers(3, 10))
        vocab = int(rng.integers(4, 30))
        chunks = random_chunks(rng, n, m, vocab)
        index = build_index(chunks)
        query = [int(t) for t in rng.integers(0, vocab, size=int(rng.integers(1, 12)))]
        for j in range(n):
            mine = bm25_score(index, query, j)
            ref = brute_force_bm25(chunks, query, j)
            assert mine == pytest.approx(ref, abs=1e-12)


def test_query_is_a_multiset():
    chunks = [np.array([1, 1, 2]), np.array([3, 4, 5])]
    index = build_index(chunks)
    once = bm25_score(index, [1], 0)
    twice = bm25_score(index, [1, 1], 0)
    assert twice == pytest.approx(2.0 * once, abs=1e-12)


def test_idf_is_smoothed_and_non_negative():
    # a term present in every chunk still gets idf = ln(1 + 0.5/(n+0.5)) > 0
    chunks = [np.array([9, 1]), np.array([9, 2]), np.array([9, 3])]
    index = build_index(chunks)
    assert index.idf(9) == pytest.approx(math.log(1 + 0.5 / 3.5), abs=1e-15)
    assert index.idf(9) > 0
    assert bm25_score(index, [9], 0) > 0


def test_top_candidates_order_and_tie_break():
    # chunks 0 and 2 identical -> equal scores; tie must go to the lower index
    chunks = [np.array([5, 5, 1]), np.array([2, 2, 2]), np.array([5, 5, 1])]
    index = build_index(chunks)
    top = top_candidates(index, [5], range(3), n_cand=3)
    assert [j for j, _ in top] == [0, 2, 1]
    assert top[0][1] == pytest.approx(top[1][1], abs=1e-15)
    # zero-score chunks are kept: the pool is defined by rank
    assert top[2][1] == 0.0
    # restricting the allowed set restricts the pool
    top2 = top_candidates(index, [5], [1, 2], n_cand=5)
    assert [j for j, _ in top2] == [2, 1]
    with pytest.raises(ValueError):
        top_candidates(index, [5], range(3), n_cand=0)


def test_top_candidates_against_full_sort():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(3, 15))
        chunks = random_chunks(rng, n, 6, 8)  # tiny vocab forces ties
        index = build_index(chunks)
        query = [int(t) for t in rng.integers(0, 8, size=5)]
        n_cand = int(rng.integers(1, n + 2))
        got = top_candidates(index, query, range(n), n_cand)
        ref = sorted(
            ((j, brute_force_bm25(chunks, query, j)) for j in range(n)),
            key=lambda item: (-item[1], item[0]),
        )[:n_cand]
        assert [j for j, _ in got] == [j for j, _ in ref]
        for (_, a), (_, b) in zip(got, ref):
            assert a == pytest.approx(b, abs=1e-12)


def test_build_index_rejects_empty():
    with pytest.raises(ValueError):
        build_index([])


def test_token_overlap_is_distinct_tokens():
    assert token_overlap([1, 1, 2, 3], [1, 3, 3, 9]) == 2
    assert token_overlap([], [1]) == 0


def test_candidates_file_roundtrip(tmp_path):
    sets = [
        CandidateSet(doc_id="d", query_index=4, items=((0, 1.5), (2, 0.25))),
        CandidateSet(doc_id="d", query_index=5, items=((1, 0.0),)),
    ]
    path = tmp_path / "cands.jsonl"
    write_candidates(sets, path)
    back = read_candidates(path)
    assert back == sets
    assert back[0].indices() == [0, 2]
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format": "nope", "version": 1}\n')
    with pytest.raises(ValueError, match="not a candidates file"):
        read_candidates(bad)
