"""A decoder LM that retrieves from its own earlier context, chunk by chunk.

The network is split in half. The lower half is a plain causal decoder whose
output token representations serve two purposes: they feed the upper half,
and they are the material retrieval works on. Every ``m``-token chunk is
summarized by one bidirectional attention layer followed by mean pooling; a
bilinear head scores a query chunk's summary against the summaries of all
chunks at least ``w`` chunks back, and the top ``K`` are retrieved. Each
retrieved chunk is concatenated with its successor chunk (2m token
representations), optionally refreshed by letting those tokens attend to the
query chunk's tokens, scaled by a learned per-neighbor gate, and handed to
the upper half, where chunked cross-attention (CCA) layers let the tokens
that predict chunk ``i+1`` read the neighbors retrieved for query chunk
``i``. Token positions ``t < m-1`` have no query chunk and pass through CCA
unchanged; position ``t >= m-1`` belongs to query chunk ``(t+1)//m - 1``.

Long documents run through the sliding-window plan of :mod:`.corpus` with
per-layer key/value caches carried across strides (stop-gradient, so each
backward stays within one window for the self-attention path, while chunk
summaries keep their graph across the whole document so the retriever is
trainable). ``run_document`` also has a reference mode that recomputes the
whole document in one pass with an equivalent block-banded mask, which must
match the streamed forward to numerical precision.

Three operating modes share one parameter set: ``txl`` (no retrieval),
``retro`` (neighbors picked by BM25 rather than the learned scorer), and
``rpt`` (the learned retriever, with gating and, at training time,
scheduled sampling between predicted and supervision-approved neighbors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import plan_windows
from . import lexical

MODES = ("txl", "retro", "rpt")
SOURCES = ("none", "self", "bm25", "forced")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Shape and behaviour of the model.

    ``n_layers`` counts all decoder layers; the lower and upper halves get
    ``n_layers // 2`` each. ``w`` is the retrieval exclusion window in
    chunks, ``k_neighbors`` the number of retrieved neighbors per query
    chunk, and ``cca_every`` the spacing of cross-attention layers within
    the upper half (the first upper layer always has one).
    """

    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    ffn_mult: int = 4
    vocab_size: int = 256
    m: int = 8
    w: int = 2
    k_neighbors: int = 2
    cca_every: int = 1
    mode: str = "rpt"
    neighbor_gating: bool = True
    gate_floor: float = 0.1
    query_augment: bool = True
    rope_base: float = 10000.0
    window_tokens: int = 64
    stride_tokens: int = 32
    dropout: float = 0.05
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.n_layers < 2 or self.n_layers % 2 != 0:
            raise ValueError(f"n_layers must be even and >= 2, got {self.n_layers}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.m < 1 or self.w < 1 or self.k_neighbors < 1 or self.cca_every < 1:
            raise ValueError("m, w, k_neighbors, cca_every must all be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 1 <= self.stride_tokens <= self.window_tokens:
            raise ValueError("need 1 <= stride_tokens <= window_tokens")
        if not 0.0 < self.gate_floor < 1.0:
            raise ValueError("gate_floor must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def n_lower(self) -> int:
        return self.n_layers // 2

    @property
    def n_upper(self) -> int:
        return self.n_layers - self.n_lower


def desk_config(**overrides) -> ModelConfig:
    """The small configuration every test and experiment here runs."""
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def full_scale_config(**overrides) -> ModelConfig:
    """The full-scale configuration, kept for reference (not run in tests)."""
    cfg = ModelConfig(
        n_layers=12,
        d_model=1024,
        n_heads=8,
        head_dim=128,
        m=64,
        w=2,
        k_neighbors=2,
        cca_every=2,
        window_tokens=2048,
        stride_tokens=1024,
    )
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# rotary position encoding
# ---------------------------------------------------------------------------


def rope_angles(positions: torch.Tensor, head_dim: int, base: float, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables for the given absolute positions, shape ``(T, head_dim/2)``."""
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=dtype) / head_dim)
    ang = positions.to(dtype)[:, None] * inv_freq[None, :]
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved feature pairs of ``x`` with shape ``(..., T, head_dim)``."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    y1 = x1 * cos - x2 * sin
    y2 = x1 * sin + x2 * cos
    return torch.stack((y1, y2), dim=-1).flatten(-2)


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, t, d = x.shape
    return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, t, dh = x.shape
    return x.transpose(1, 2).reshape(b, t, h * dh)


def causal_bias(n_cache: int, n_new: int, dtype: torch.dtype) -> torch.Tensor:
    """Additive attention bias: cached keys fully visible, new keys causal."""
    bias = torch.zeros(n_new, n_cache + n_new, dtype=dtype)
    future = torch.triu(torch.ones(n_new, n_new, dtype=torch.bool), diagonal=1)
    bias[:, n_cache:] = bias[:, n_cache:].masked_fill(future, float("-inf"))
    return bias


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


KVCache = tuple[torch.Tensor, torch.Tensor]


class CausalSelfAttention(nn.Module):
    """Multi-head causal self-attention with rotary positions and a KV cache."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(
        self, x: torch.Tensor, positions: torch.Tensor, cache: Optional[KVCache] = None
    ) -> tuple[torch.Tensor, KVCache]:
        """``x`` is ``(B, T_new, d)`` at absolute ``positions``; returns the
        attention output and the full (cache + new) key/value pair."""
        cfg = self.cfg
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = _split_heads(q, cfg.n_heads)
        k = _split_heads(k, cfg.n_heads)
        v = _split_heads(v, cfg.n_heads)
        cos, sin = rope_angles(positions, cfg.head_dim, cfg.rope_base, x.dtype)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        n_cache = k.shape[2] - x.shape[1]
        bias = causal_bias(n_cache, x.shape[1], x.dtype)
        y = F.scaled_dot_product_attention(
            q, k, v, attn_mask=bias, dropout_p=cfg.dropout if self.training else 0.0
        )
        return self.drop(self.out(_merge_heads(y))), (k, v)

    def forward_masked(self, x: torch.Tensor, positions: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        """Single-pass variant with an arbitrary additive mask (reference path)."""
        cfg = self.cfg
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = _split_heads(q, cfg.n_heads)
        k = _split_heads(k, cfg.n_heads)
        v = _split_heads(v, cfg.n_heads)
        cos, sin = rope_angles(positions, cfg.head_dim, cfg.rope_base, x.dtype)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        y = F.scaled_dot_product_attention(
            q, k, v, attn_mask=bias, dropout_p=cfg.dropout if self.training else 0.0
        )
        return self.drop(self.out(_merge_heads(y)))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.up = nn.Linear(cfg.d_model, cfg.ffn_mult * cfg.d_model)
        self.down = nn.Linear(cfg.ffn_mult * cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.down(F.gelu(self.up(x))))


class DecoderLayer(nn.Module):
    """Pre-norm causal decoder layer (lower half)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg)

    def forward(
        self, x: torch.Tensor, positions: torch.Tensor, cache: Optional[KVCache] = None
    ) -> tuple[torch.Tensor, KVCache]:
        y, kv = self.attn(self.ln1(x), positions, cache)
        x = x + y
        x = x + self.ffn(self.ln2(x))
        return x, kv

    def forward_masked(self, x: torch.Tensor, positions: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        x = x + self.attn.forward_masked(self.ln1(x), positions, bias)
        return x + self.ffn(self.ln2(x))


class ChunkEmbedder(nn.Module):
    """One bidirectional attention layer over a chunk's token representations,
    then mean pooling. Neither stage injects positional information, so the
    summary is permutation-invariant in its inputs (the inputs themselves
    carry order, coming from a position-aware causal decoder)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ln = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, reprs: torch.Tensor) -> torch.Tensor:
        """``(B, m, d)`` token representations -> ``(B, d)`` chunk summaries."""
        cfg = self.cfg
        x = self.ln(reprs)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        y = F.scaled_dot_product_attention(
            _split_heads(q, cfg.n_heads), _split_heads(k, cfg.n_heads), _split_heads(v, cfg.n_heads)
        )
        return (reprs + self.out(_merge_heads(y))).mean(dim=1)


class RetrieverHead(nn.Module):
    """Bilinear retrieval scores between chunk summaries."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.wq = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def scores(self, query_emb: torch.Tensor, key_embs: torch.Tensor) -> torch.Tensor:
        """``query_emb`` is ``(d,)``, ``key_embs`` ``(n, d)``; returns ``(n,)``."""
        return self.wk(key_embs) @ self.wq(query_emb)


def select_top_k(scores: torch.Tensor, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, ties broken toward lower index.

    The selection itself is not differentiated through; callers should pass
    detached scores. Non-finite scores are rejected.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if scores.numel() and not torch.isfinite(scores).all():
        raise ValueError("non-finite retrieval scores")
    order = torch.argsort(scores, descending=True, stable=True)
    return [int(i) for i in order[:k]]


class NeighborQueryAugment(nn.Module):
    """Let retrieved-neighbor token representations attend over the query
    chunk's token representations (cross-attention, residual)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ln_x = nn.LayerNorm(cfg.d_model)
        self.ln_q = nn.LayerNorm(cfg.d_model)
        self.q_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.k_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.v_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, neighbors: torch.Tensor, query_reprs: torch.Tensor) -> torch.Tensor:
        """``neighbors`` is ``(n, 2m, d)``, ``query_reprs`` ``(m, d)``."""
        cfg = self.cfg
        n = neighbors.shape[0]
        q = _split_heads(self.q_proj(self.ln_x(neighbors)), cfg.n_heads)
        ctx = self.ln_q(query_reprs)[None].expand(n, -1, -1)
        k = _split_heads(self.k_proj(ctx), cfg.n_heads)
        v = _split_heads(self.v_proj(ctx), cfg.n_heads)
        y = F.scaled_dot_product_attention(q, k, v)
        return neighbors + self.out(_merge_heads(y))


class NeighborGate(nn.Module):
    """Per-neighbor scalar gates.

    Each neighbor block is mean-pooled to one vector; pooled vectors, in
    document order (query chunk ascending, neighbor rank ascending), attend
    causally over their predecessors through a dedicated single-head
    attention layer, and the enriched vector is dotted with a learned vector
    and squashed. Gates are clamped from below at ``gate_floor``, so every
    gate lies in ``[gate_floor, 1)``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.q_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.k_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.v_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.w_ng = nn.Parameter(torch.zeros(cfg.d_model))

    def forward(self, pooled_new: torch.Tensor, pooled_prev: Optional[torch.Tensor]) -> torch.Tensor:
        """``pooled_new`` is ``(n, d)`` (this query chunk's neighbors, rank
        order); ``pooled_prev`` is ``(P, d)`` — all earlier pooled vectors in
        the document. Returns gates ``(n,)``."""
        if pooled_prev is not None and pooled_prev.numel():
            seq = torch.cat([pooled_prev, pooled_new], dim=0)
        else:
            seq = pooled_new
        p = seq.shape[0] - pooled_new.shape[0]
        q = self.q_proj(pooled_new)
        k = self.k_proj(seq)
        v = self.v_proj(seq)
        bias = causal_bias(p, pooled_new.shape[0], seq.dtype)
        att = F.scaled_dot_product_attention(q[None], k[None], v[None], attn_mask=bias)[0]
        enriched = pooled_new + att
        logits = enriched @ self.w_ng / self.cfg.d_model
        return torch.clamp(torch.sigmoid(logits), min=self.cfg.gate_floor)


class CCABlock(nn.Module):
    """Chunked cross-attention: query-span hidden states attend over the
    flattened, gated neighbor rows of their query chunk. Key/value inputs are
    used raw (no normalization, no biases), so an all-zero neighbor block
    contributes exactly nothing and the residual is an exact identity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ln_q = nn.LayerNorm(cfg.d_model)
        self.q_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.k_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.v_proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, h_span: torch.Tensor, neighbor_rows: torch.Tensor) -> torch.Tensor:
        """``h_span`` is ``(1, t, d)``; ``neighbor_rows`` ``(R, d)``."""
        cfg = self.cfg
        q = _split_heads(self.q_proj(self.ln_q(h_span)), cfg.n_heads)
        k = _split_heads(self.k_proj(neighbor_rows)[None], cfg.n_heads)
        v = _split_heads(self.v_proj(neighbor_rows)[None], cfg.n_heads)
        y = F.scaled_dot_product_attention(
            q, k, v, dropout_p=cfg.dropout if self.training else 0.0
        )
        return h_span + self.drop(self.out(_merge_heads(y)))


class UpperLayer(nn.Module):
    """Upper-half decoder layer: self-attention, optional CCA, feed-forward.

    The driver applies the three stages itself so CCA can be scattered onto
    the per-chunk query spans; ``cca`` is ``None`` on layers without one.
    """

    def __init__(self, cfg: ModelConfig, with_cca: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.cca = CCABlock(cfg) if with_cca else None
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg)

    def attn_step(
        self, x: torch.Tensor, positions: torch.Tensor, cache: Optional[KVCache] = None
    ) -> tuple[torch.Tensor, KVCache]:
        y, kv = self.attn(self.ln1(x), positions, cache)
        return x + y, kv

    def attn_step_masked(self, x: torch.Tensor, positions: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        return x + self.attn.forward_masked(self.ln1(x), positions, bias)

    def ffn_step(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ffn(self.ln2(x))


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class SelfRetroModel(nn.Module):
    """Decoder LM with native chunk retrieval (see module docstring).

    All components exist in every mode so that models trained in different
    modes from the same seed start from identical shared weights; the mode
    only decides which paths run.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.embed_drop = nn.Dropout(cfg.dropout)
        self.lower = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_lower))
        self.chunk_embedder = ChunkEmbedder(cfg)
        self.retriever = RetrieverHead(cfg)
        self.augment = NeighborQueryAugment(cfg)
        self.gate = NeighborGate(cfg)
        self.upper = nn.ModuleList(
            UpperLayer(cfg, with_cca=(u % cfg.cca_every == 0)) for u in range(cfg.n_upper)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        nn.init.normal_(self.embed.weight, mean=0.0, std=0.02)
        self.to(cfg.torch_dtype)

    # The output head is tied to the input embedding.
    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.ln_f(hidden) @ self.embed.weight.T

    def window_logits(self, tokens: torch.Tensor) -> torch.Tensor:
        """Pure decoder pass over ``(B, T)`` token batches with ``T`` at most
        one window; no retrieval in any mode. Used for reference scoring."""
        cfg = self.config
        if tokens.dim() != 2:
            raise ValueError("window_logits expects a (B, T) batch")
        if tokens.shape[1] > cfg.window_tokens:
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds one window ({cfg.window_tokens})"
            )
        positions = torch.arange(tokens.shape[1])
        x = self.embed_drop(self.embed(tokens))
        for layer in self.lower:
            x, _ = layer(x, positions)
        for layer in self.upper:
            x, _ = layer.attn_step(x, positions)
            x = layer.ffn_step(x)
        return self.logits(x)


# ---------------------------------------------------------------------------
# document-level forward
# ---------------------------------------------------------------------------


class SupervisionLike(Protocol):
    """What the forward pass needs from a supervision record."""

    query_index: int

    def candidate_indices(self) -> Sequence[int]: ...

    def oracle_neighbors(self, k: int) -> Sequence[int]: ...


@dataclass
class NeighborBlock:
    """Retrieved, augmented, gated neighbors of one query chunk."""

    query_index: int
    indices: tuple[int, ...]
    block: torch.Tensor  # (K, 2m, d); zero rows pad missing neighbors
    gates: tuple[float, ...]  # per slot; padded slots pinned at the gate floor


@dataclass
class ForwardOutput:
    """Everything a document forward produces."""

    nll_sum: torch.Tensor
    n_positions: int
    n_chunks: int
    position_nll: Optional[np.ndarray] = None
    selected: dict[int, tuple[int, ...]] = field(default_factory=dict)
    gates: dict[int, tuple[float, ...]] = field(default_factory=dict)
    ret_scores: list[tuple[object, torch.Tensor]] = field(default_factory=list)

    @property
    def mean_nll(self) -> torch.Tensor:
        return self.nll_sum / max(self.n_positions, 1)


def default_source(mode: str) -> str:
    return {"txl": "none", "retro": "bm25", "rpt": "self"}[mode]


_ALLOWED_SOURCES = {
    "txl": ("none",),
    "retro": ("bm25", "forced", "none"),
    "rpt": ("self", "forced", "none"),
}


def query_chunk_of(t: int, m: int) -> int:
    """Query chunk owning position ``t`` (t >= m-1): ``(t+1)//m - 1``."""
    return (t + 1) // m - 1


def run_document(
    model: SelfRetroModel,
    tokens: np.ndarray | torch.Tensor,
    *,
    source: Optional[str] = None,
    records: Optional[Mapping[int, SupervisionLike]] = None,
    p_ss: float = 0.0,
    sample_rng: Optional[np.random.Generator] = None,
    forced_neighbors: Optional[Mapping[int, Sequence[int]]] = None,
    bm25_query: str = "query",
    k_neighbors: Optional[int] = None,
    collect_positions: bool = False,
    collect_ret_scores: bool = False,
    reference_recompute: bool = False,
) -> ForwardOutput:
    """Run one document through the model with its sliding-window plan.

    ``source`` selects where neighbors come from (default per mode):
    ``none`` disables retrieval, ``self`` uses the learned retriever,
    ``bm25`` the lexical scorer (``bm25_query`` is ``"query"`` for the query
    chunk alone or ``"query_target"`` to append the following chunk at
    training time), ``forced`` a caller-supplied map of query chunk ->
    neighbor indices. With ``p_ss > 0`` and supervision ``records``, each
    query chunk independently uses its record's approved neighbors instead
    of the predicted ones with probability ``p_ss`` (all-or-nothing).

    ``reference_recompute=True`` replays the document as a single forward
    pass with a block-banded attention mask equivalent to the streamed
    key/value caches; outputs must agree with the streamed path.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) < 1:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    if source is None:
        source = default_source(cfg.mode)
    if source not in SOURCES:
        raise ValueError(f"unknown neighbor source {source!r}")
    if source not in _ALLOWED_SOURCES[cfg.mode]:
        raise ValueError(f"source {source!r} is not valid in mode {cfg.mode!r}")
    if source == "forced" and forced_neighbors is None:
        raise ValueError("source 'forced' requires forced_neighbors")
    if bm25_query not in ("query", "query_target"):
        raise ValueError(f"unknown bm25 query flavor {bm25_query!r}")
    if p_ss > 0.0 and source == "self" and sample_rng is None:
        raise ValueError("scheduled sampling requires sample_rng")

    L = len(tokens)
    m, w = cfg.m, cfg.w
    K = k_neighbors if k_neighbors is not None else cfg.k_neighbors
    n_chunks = L // m
    plan = plan_windows(L, cfg.window_tokens, cfg.stride_tokens)
    keep = cfg.window_tokens - cfg.stride_tokens
    dtype = cfg.torch_dtype
    tok_t = torch.from_numpy(tokens)
    records = records or {}
    forced_neighbors = forced_neighbors or {}

    # Document-level state. Representations and summaries keep their autograd
    # graph across windows; only the self-attention KV caches are detached.
    reprs_all: Optional[torch.Tensor] = None  # (n_done, d) lower outputs
    chunk_embs: list[torch.Tensor] = []
    neighbor_blocks: dict[int, Optional[NeighborBlock]] = {}
    pooled_seq: list[torch.Tensor] = []  # gate-attention history, (chunk, rank) order
    out = ForwardOutput(
        nll_sum=torch.zeros((), dtype=dtype),
        n_positions=0,
        n_chunks=n_chunks,
        position_nll=np.zeros(max(L - 1, 1)) if collect_positions else None,
    )

    def chunk_reprs(c: int) -> torch.Tensor:
        return reprs_all[c * m : (c + 1) * m]

    def neighbors_for(q: int) -> tuple[int, ...]:
        lo_hi = q - w  # largest retrievable index
        if lo_hi < 0:
            return ()
        if source == "forced":
            sel = tuple(int(j) for j in forced_neighbors.get(q, ()))[:K]
            for j in sel:
                if not 0 <= j <= lo_hi:
                    raise ValueError(f"forced neighbor {j} outside retrievable set of chunk {q}")
            return sel
        if source == "bm25":
            chunks = [tokens[j * m : (j + 1) * m] for j in range(lo_hi + 1)]
            query = list(tokens[q * m : (q + 1) * m])
            if bm25_query == "query_target" and q + 1 < n_chunks:
                query += list(tokens[(q + 1) * m : (q + 2) * m])
            index = lexical.build_index(chunks)
            return tuple(j for j, _ in lexical.top_candidates(index, query, range(lo_hi + 1), K))
        # source == "self"
        keys = torch.stack(chunk_embs[: lo_hi + 1])
        scores = model.retriever.scores(chunk_embs[q], keys)
        record = records.get(q)
        if collect_ret_scores and record is not None:
            cand = list(record.candidate_indices())
            if any(not 0 <= j <= lo_hi for j in cand):
                raise ValueError(f"record candidate outside retrievable set of chunk {q}")
            out.ret_scores.append((record, scores[cand]))
        predicted = tuple(select_top_k(scores.detach(), min(K, lo_hi + 1)))
        if p_ss > 0.0 and record is not None and sample_rng is not None:
            if sample_rng.random() < p_ss:
                return tuple(record.oracle_neighbors(K))
        return predicted

    def build_block(q: int) -> Optional[NeighborBlock]:
        sel = neighbors_for(q)
        if not sel:
            if q - w >= 0 and source != "none":
                # retrievable set nonempty but nothing selected (e.g. empty
                # approved set): zero block, gates pinned at the floor
                block = torch.zeros(K, 2 * m, cfg.d_model, dtype=dtype)
                return NeighborBlock(q, (), block, (cfg.gate_floor,) * K)
            return None
        rows = []
        for j in sel:
            rows.append(torch.cat([chunk_reprs(j), chunk_reprs(j + 1)], dim=0))
        stacked = torch.stack(rows)  # (n, 2m, d)
        if cfg.query_augment:
            stacked = model.augment(stacked, chunk_reprs(q))
        if cfg.neighbor_gating:
            pooled = stacked.mean(dim=1)  # (n, d)
            prev = torch.stack(pooled_seq) if pooled_seq else None
            gates = model.gate(pooled, prev)
            pooled_seq.extend(pooled[i] for i in range(pooled.shape[0]))
            gated = stacked * gates[:, None, None]
            gate_vals = tuple(float(g) for g in gates.detach())
        else:
            gated = stacked
            gate_vals = (1.0,) * len(sel)
        if len(sel) < K:
            pad = torch.zeros(K - len(sel), 2 * m, cfg.d_model, dtype=dtype)
            gated = torch.cat([gated, pad], dim=0)
            gate_vals = gate_vals + (cfg.gate_floor,) * (K - len(sel))
        return NeighborBlock(q, sel, gated, gate_vals)

    def prepare_queries(first_pos: int, end_pos: int) -> list[int]:
        """Build neighbor blocks for query chunks owning ``[first_pos, end_pos)``."""
        if source == "none" or end_pos - 1 < m - 1:
            return []
        q_lo = max(0, query_chunk_of(max(first_pos, m - 1), m))
        q_hi = min(query_chunk_of(end_pos - 1, m), n_chunks - 1)
        touched = []
        for q in range(q_lo, q_hi + 1):
            if q not in neighbor_blocks:
                nb = build_block(q)
                neighbor_blocks[q] = nb
                if nb is not None:
                    out.selected[q] = nb.indices
                    out.gates[q] = nb.gates
            touched.append(q)
        return touched

    def apply_cca(layer: UpperLayer, h: torch.Tensor, a: int, b: int, queries: list[int]) -> torch.Tensor:
        if layer.cca is None or not queries:
            return h
        for q in queries:
            nb = neighbor_blocks.get(q)
            if nb is None:
                continue
            span_lo = max(a, (q + 1) * m - 1)
            span_hi = min(b, (q + 2) * m - 1, L)
            if span_lo >= span_hi:
                continue
            rows = nb.block.reshape(-1, cfg.d_model)
            lo, hi = span_lo - a, span_hi - a
            mid = layer.cca(h[:, lo:hi], rows)
            h = torch.cat([h[:, :lo], mid, h[:, hi:]], dim=1)
        return h

    def accumulate_loss(h: torch.Tensor, a: int, b: int) -> None:
        t_hi = min(b, L - 1)
        if t_hi <= a:
            return
        lg = model.logits(h)[0, : t_hi - a]
        nll = F.cross_entropy(lg, tok_t[a + 1 : t_hi + 1], reduction="none")
        out.nll_sum = out.nll_sum + nll.sum()
        out.n_positions += t_hi - a
        if collect_positions:
            out.position_nll[a:t_hi] = nll.detach().to(torch.float64).numpy()

    if not reference_recompute:
        lower_caches: list[Optional[KVCache]] = [None] * len(model.lower)
        upper_caches: list[Optional[KVCache]] = [None] * len(model.upper)

        def trim(kv: KVCache) -> Optional[KVCache]:
            if keep == 0:
                return None
            k, v = kv
            return (k[:, :, -keep:].detach(), v[:, :, -keep:].detach())

        for span in plan.spans:
            a, b = span.output_start, span.output_end
            positions = torch.arange(a, b)
            x = model.embed_drop(model.embed(tok_t[a:b][None]))
            for li, layer in enumerate(model.lower):
                x, kv = layer(x, positions, lower_caches[li])
                lower_caches[li] = trim(kv)
            reprs_all = x[0] if reprs_all is None else torch.cat([reprs_all, x[0]], dim=0)
            while len(chunk_embs) < n_chunks and (len(chunk_embs) + 1) * m <= b:
                c = len(chunk_embs)
                chunk_embs.append(model.chunk_embedder(chunk_reprs(c)[None])[0])
            queries = prepare_queries(a, b)
            h = x
            for ui, layer in enumerate(model.upper):
                h, kv = layer.attn_step(h, positions, upper_caches[ui])
                upper_caches[ui] = trim(kv)
                h = apply_cca(layer, h, a, b, queries)
                h = layer.ffn_step(h)
            accumulate_loss(h, a, b)
    else:
        # Reference path: one pass over the whole document with a mask that
        # reproduces the streamed attention pattern exactly — position p
        # attends to [input_start(span(p)), p].
        win_start = np.zeros(L, dtype=np.int64)
        for span in plan.spans:
            win_start[span.output_start : span.output_end] = span.input_start
        pos_idx = torch.arange(L)
        allowed = (pos_idx[None, :] <= pos_idx[:, None]) & (
            pos_idx[None, :] >= torch.from_numpy(win_start)[:, None]
        )
        bias = torch.where(allowed, 0.0, float("-inf")).to(dtype)
        positions = torch.arange(L)
        x = model.embed_drop(model.embed(tok_t[None]))
        for layer in model.lower:
            x = layer.forward_masked(x, positions, bias)
        reprs_all = x[0]
        for c in range(n_chunks):
            chunk_embs.append(model.chunk_embedder(chunk_reprs(c)[None])[0])
        queries = prepare_queries(0, L)
        h = x
        for layer in model.upper:
            h = layer.attn_step_masked(h, positions, bias)
            h = apply_cca(layer, h, 0, L, queries)
            h = layer.ffn_step(h)
        accumulate_loss(h, 0, L)

    return out
