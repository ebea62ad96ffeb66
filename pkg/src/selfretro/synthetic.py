"""Synthetic byte corpus with long-range key-value structure.

Every chunk is exactly 8 bytes, so with ``m=8`` the chunk grid aligns with
the semantic units. Each document mixes four kinds of chunks:

* definition    ``$KV:7216``  -- key ``KV`` carries value ``7216``
* value decoy   ``~KV:9871``  -- same key, wrong value, wrong sigil
  (``n_value_decoys`` of these per fact)
* query         ``?KV_____``  -- asks for the key's value
* answer        ``!7216___``  -- immediately follows its query

plus lowercase filler. A query's definition sits at least ``min_gap`` chunks
earlier, far outside the attention window, so predicting the answer bytes
requires retrieving the definition chunk. The decoys share the key bytes
with the definition and the query, which makes purely lexical ranking
ambiguous, while a reference LM that has learned to copy digits after ``!``
scores the true definition far above the decoys. Some facts repeat their
query later in the document; the earlier query/answer pair is then a second
useful retrieval target. Short facts (definition, filler, query, answer in
a row) appear as local patterns that teach a plain LM the copy rule itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHUNK_LEN = 8


@dataclass
class SynthConfig:
    """Corpus shape. Documents all have ``chunks_per_doc * 8`` bytes."""

    n_train: int = 32
    n_test: int = 10
    chunks_per_doc: int = 64
    n_facts: int = 4
    n_short_facts: int = 2
    n_value_decoys: int = 1
    min_gap: int = 12
    repeat_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("document counts must be non-negative")
        if self.chunks_per_doc < 16:
            raise ValueError("chunks_per_doc must be at least 16")
        if self.n_facts < 1:
            raise ValueError("n_facts must be at least 1")
        if self.n_short_facts < 0:
            raise ValueError("n_short_facts must be non-negative")
        if self.n_value_decoys < 0:
            raise ValueError("n_value_decoys must be non-negative")
        if self.min_gap < 4:
            raise ValueError("min_gap must be at least 4 so definitions leave the local window")
        if self.min_gap >= self.chunks_per_doc - 4:
            raise ValueError("min_gap leaves no room for query/answer pairs")
        if not 0.0 <= self.repeat_fraction <= 1.0:
            raise ValueError("repeat_fraction must lie in [0, 1]")


class _TooDense(Exception):
    """Internal: a random placement attempt ran out of free slots."""


def _sample_keys(rng: np.random.Generator, count: int) -> list[str]:
    if count > 26 * 26:
        raise ValueError("at most 676 distinct keys per document")
    picks = rng.choice(26 * 26, size=count, replace=False)
    return [chr(65 + int(p) // 26) + chr(65 + int(p) % 26) for p in picks]


def _filler(rng: np.random.Generator) -> bytes:
    return bytes(int(b) for b in rng.integers(97, 123, size=CHUNK_LEN))


def _definition(key: str, value: str) -> bytes:
    return f"${key}:{value}".encode("ascii")


def _value_decoy(key: str, decoy: str) -> bytes:
    return f"~{key}:{decoy}".encode("ascii")


def _query(key: str) -> bytes:
    return f"?{key}_____".encode("ascii")


def _answer(value: str) -> bytes:
    return f"!{value}___".encode("ascii")


def _attempt(rng: np.random.Generator, cfg: SynthConfig) -> bytes:
    n = cfg.chunks_per_doc
    slots: list[bytes | None] = [None] * n

    def free(i: int) -> bool:
        return 0 <= i < n and slots[i] is None

    def pick_free(lo: int, hi: int) -> int:
        options = [i for i in range(max(lo, 0), min(hi, n - 1) + 1) if free(i)]
        if not options:
            raise _TooDense
        return int(rng.choice(options))

    def pick_pair(lo: int, hi: int) -> int:
        options = [i for i in range(max(lo, 0), min(hi, n - 2) + 1) if free(i) and free(i + 1)]
        if not options:
            raise _TooDense
        return int(rng.choice(options))

    def pick_run(length: int) -> int:
        options = [
            i for i in range(0, n - length + 1) if all(free(i + j) for j in range(length))
        ]
        if not options:
            raise _TooDense
        return int(rng.choice(options))

    keys = _sample_keys(rng, cfg.n_facts + cfg.n_short_facts)
    raw_values = rng.integers(0, 10000, size=2 * cfg.n_facts + cfg.n_short_facts)

    for f in range(cfg.n_facts):
        key = keys[f]
        value = f"{int(raw_values[2 * f]):04d}"
        decoy = f"{int(raw_values[2 * f + 1]):04d}"
        if decoy == value:
            decoy = f"{(int(decoy) + 1) % 10000:04d}"

        d = pick_free(0, n // 3 - 1)
        slots[d] = _definition(key, value)
        q = pick_pair(d + cfg.min_gap, n - 2)
        slots[q] = _query(key)
        slots[q + 1] = _answer(value)
        if cfg.n_value_decoys:
            vd = pick_free(d + 1, q - 1)
            slots[vd] = _value_decoy(key, decoy)
        qd = pick_free(d + 1, q - 1)
        slots[qd] = _query(key)
        for _ in range(cfg.n_value_decoys - 1):
            extra = f"{int(rng.integers(0, 10000)):04d}"
            if extra == value:
                extra = f"{(int(extra) + 1) % 10000:04d}"
            vd = pick_free(d + 1, q - 1)
            slots[vd] = _value_decoy(key, extra)

        if rng.random() < cfg.repeat_fraction:
            try:
                q2 = pick_pair(q + 4, n - 2)
            except _TooDense:
                pass
            else:
                slots[q2] = _query(key)
                slots[q2 + 1] = _answer(value)

    for s in range(cfg.n_short_facts):
        key = keys[cfg.n_facts + s]
        value = f"{int(raw_values[2 * cfg.n_facts + s]):04d}"
        start = pick_run(4)
        slots[start] = _definition(key, value)
        slots[start + 1] = _filler(rng)
        slots[start + 2] = _query(key)
        slots[start + 3] = _answer(value)

    for i in range(n):
        if slots[i] is None:
            slots[i] = _filler(rng)
    body = b"".join(slots)  # type: ignore[arg-type]
    assert len(body) == n * CHUNK_LEN
    return body


def make_document(rng: np.random.Generator, cfg: SynthConfig) -> bytes:
    """One document's bytes; retries random placements before giving up."""
    for _ in range(200):
        try:
            return _attempt(rng, cfg)
        except _TooDense:
            continue
    raise ValueError(
        "synthetic corpus config too dense to place all chunks; "
        "lower n_facts/min_gap or raise chunks_per_doc"
    )


def generate_corpus(cfg: SynthConfig, out_dir: str | Path) -> tuple[list[Path], list[Path]]:
    """Write ``train/`` and ``test/`` document files; returns the two path lists."""
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir)
    train_dir = out / "train"
    test_dir = out / "test"
    train_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)
    train_paths: list[Path] = []
    test_paths: list[Path] = []
    for i in range(cfg.n_train):
        path = train_dir / f"doc_{i:03d}.txt"
        path.write_bytes(make_document(rng, cfg))
        train_paths.append(path)
    for i in range(cfg.n_test):
        path = test_dir / f"doc_{i:03d}.txt"
        path.write_bytes(make_document(rng, cfg))
        test_paths.append(path)
    return train_paths, test_paths
