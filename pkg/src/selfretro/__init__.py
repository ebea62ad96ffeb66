"""Chunk-wise retrieval-augmented language modeling with a natively trained retriever.

A decoder LM whose lower half produces chunk embeddings, a bilinear scorer
ranks earlier chunks of the same document, and the upper half attends to the
retrieved chunks' token representations. Retrieval is supervised by scoring
candidate chunks with a reference LM; training, evaluation, and the analysis
toolchain live in the submodules and behind the ``selfretro`` CLI.
"""

from .corpus import Document, ChunkPartition, ingest, partition, plan_windows, retrievable_set
from .lexical import Bm25Index, build_index, bm25_score, top_candidates
from .modeling import ModelConfig, SelfRetroModel, desk_config, full_scale_config, run_document
from .supervision import (
    ModelProvider,
    SupervisionRecord,
    UniformProvider,
    build_records_for_partition,
    eligible_query_range,
    max_target_curve,
    read_records,
    write_records,
)
from .training import AdaBelief, Schedules, TrainConfig, Trainer, lambdarank_loss, load_model
from .evaluation import EvalReport, evaluate, ndcg_at_k, perplexity, precision_recall_at_k

__version__ = "0.1.0"

__all__ = [
    "AdaBelief",
    "Bm25Index",
    "ChunkPartition",
    "Document",
    "EvalReport",
    "ModelConfig",
    "ModelProvider",
    "Schedules",
    "SelfRetroModel",
    "SupervisionRecord",
    "TrainConfig",
    "Trainer",
    "UniformProvider",
    "bm25_score",
    "build_index",
    "build_records_for_partition",
    "desk_config",
    "eligible_query_range",
    "evaluate",
    "full_scale_config",
    "ingest",
    "lambdarank_loss",
    "load_model",
    "max_target_curve",
    "ndcg_at_k",
    "partition",
    "perplexity",
    "plan_windows",
    "precision_recall_at_k",
    "read_records",
    "retrievable_set",
    "run_document",
    "top_candidates",
    "write_records",
    "__version__",
]
