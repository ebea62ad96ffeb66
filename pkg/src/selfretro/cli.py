"""Command-line pipeline: ingest -> build-supervision -> train -> eval -> analyze.

Commands are independent processes; everything they exchange lives in files
(manifests, supervision records, checkpoints, metrics, reports). A run
directory holds one training run: the frozen effective configuration, the
metrics stream, and the checkpoint. Relative run-directory names resolve
under ``$SELFRETRO_RUNS`` (default ``./runs``).

Configuration is a flat key-value namespace (see ``RunConfig``): defaults,
optionally overlaid by a config file (JSON object or ``key = value`` lines),
then by repeated ``--set key=value`` flags. Unknown keys are an error naming
the key.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import corpus as corpus_mod
from . import evaluation as eval_mod
from . import supervision as sup_mod
from . import synthetic as synth_mod
from . import training as train_mod
from .modeling import ModelConfig, default_source
from .training import TrainConfig, Trainer

logger = logging.getLogger("selfretro")

RUNS_ENV = "SELFRETRO_RUNS"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Every tunable of the pipeline, flat. ``gating`` is ``auto`` (on for
    the learned-retrieval mode, off for the lexical baseline), ``on``, or
    ``off``."""

    # model shape
    mode: str = "rpt"
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
    gating: str = "auto"
    gate_floor: float = 0.1
    query_augment: bool = True
    rope_base: float = 10000.0
    window_tokens: int = 64
    stride_tokens: int = 32
    dropout: float = 0.05
    dtype: str = "float32"
    # optimization
    steps: int = 200
    batch_docs: int = 4
    seed: int = 0
    lr_max: float = 5e-3
    lr_min_ratio: float = 0.1
    alpha_max: float = 1e-2
    alpha_ramp_frac: float = 0.2
    tau_max: float = 4.0
    ss_frac: float = 0.9
    ss_mode: str = "anneal"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    weight_decay: float = 1e-8
    clip_norm: float = 1.0
    # data and supervision
    tokenizer: str = "bytes"
    n_cand: int = 20
    flavor: str = "sem"

    def model_config(self) -> ModelConfig:
        if self.gating == "auto":
            gating_on = self.mode == "rpt"
        elif self.gating in ("on", "off"):
            gating_on = self.gating == "on"
        else:
            raise ValueError(f"gating must be auto/on/off, got {self.gating!r}")
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            ffn_mult=self.ffn_mult,
            vocab_size=self.vocab_size,
            m=self.m,
            w=self.w,
            k_neighbors=self.k_neighbors,
            cca_every=self.cca_every,
            mode=self.mode,
            neighbor_gating=gating_on,
            gate_floor=self.gate_floor,
            query_augment=self.query_augment,
            rope_base=self.rope_base,
            window_tokens=self.window_tokens,
            stride_tokens=self.stride_tokens,
            dropout=self.dropout,
            dtype=self.dtype,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            model=self.model_config(),
            steps=self.steps,
            batch_docs=self.batch_docs,
            seed=self.seed,
            lr_max=self.lr_max,
            lr_min_ratio=self.lr_min_ratio,
            alpha_max=self.alpha_max,
            alpha_ramp_frac=self.alpha_ramp_frac,
            tau_max=self.tau_max,
            ss_frac=self.ss_frac,
            ss_mode=self.ss_mode,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
        )


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: not a boolean: {raw!r}")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def apply_config_value(cfg: RunConfig, key: str, value) -> None:
    if key not in _FIELD_TYPES:
        raise ValueError(f"unknown config key: {key!r}")
    if isinstance(value, str):
        value = _coerce(key, value)
    setattr(cfg, key, value)


def load_config_file(cfg: RunConfig, path: str | Path) -> None:
    """Overlay ``cfg`` with a JSON object or ``key = value`` lines."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"config file must hold a flat object: {path}")
        for key, value in data.items():
            apply_config_value(cfg, key, value)
        return
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = body.split("=", 1)
        apply_config_value(cfg, key.strip(), raw.strip())


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        load_config_file(cfg, args.config)
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        apply_config_value(cfg, key.strip(), raw.strip())
    for key in ("mode", "steps", "seed", "flavor"):
        val = getattr(args, key, None)
        if val is not None:
            apply_config_value(cfg, key, str(val))
    return cfg


def _frozen_config_dict(cfg: RunConfig) -> dict:
    return {k: getattr(cfg, k) for k in sorted(_FIELD_TYPES)}


def resolve_run_dir(name: str | Path) -> Path:
    path = Path(name)
    if path.is_absolute() or len(path.parts) > 1:
        return path
    root = Path(os.environ.get(RUNS_ENV, "runs"))
    return root / path


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def _load_docs(corpus_path: str, cfg: RunConfig) -> list[corpus_mod.Document]:
    docs = corpus_mod.ingest(corpus_path, tokenizer=cfg.tokenizer, vocab_size=cfg.vocab_size)
    if not docs:
        logger.warning("corpus %s is empty", corpus_path)
    return docs


def _load_records(path: str) -> dict[str, dict[int, sup_mod.SupervisionRecord]]:
    _, records = sup_mod.read_records(path)
    return sup_mod.records_by_doc(records)


def _make_provider(spec: str, cfg: RunConfig) -> sup_mod.ScoringProvider:
    if spec == "uniform":
        return sup_mod.UniformProvider(cfg.vocab_size)
    if spec.startswith("checkpoint:"):
        model = train_mod.load_model(spec.split(":", 1)[1])
        return sup_mod.ModelProvider(model, name=spec)
    if spec.startswith("responses:"):
        rest = spec.split(":", 1)[1]
        if "," not in rest:
            raise ValueError("responses provider needs 'responses:REQUESTS,RESPONSES'")
        req, resp = rest.split(",", 1)
        return sup_mod.ResponsesProvider(req, resp)
    raise ValueError(f"unknown provider {spec!r} (uniform | checkpoint:PATH | responses:REQ,RESP)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    docs = _load_docs(args.corpus, cfg)
    parts = [corpus_mod.partition(d, cfg.m) for d in docs]
    corpus_mod.write_manifest(parts, args.out, tokenizer=cfg.tokenizer, vocab_size=cfg.vocab_size)
    dropped = sum(p.dropped for p in parts)
    logger.info(
        "ingested %d documents (%d chunks, %d trailing tokens dropped) -> %s",
        len(parts), sum(p.n_chunks for p in parts), dropped, args.out,
    )
    return 0


def cmd_build_supervision(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    docs = _load_docs(args.corpus, cfg)
    parts = [corpus_mod.partition(d, cfg.m) for d in docs]

    if args.emit_requests:
        pairs: list[tuple[list[int], list[int]]] = []
        for part in parts:
            for q in sup_mod.eligible_query_range(part.n_chunks, cfg.w):
                cands = sup_mod.bm25_candidates(part, q, cfg.w, cfg.n_cand).indices()
                pairs.extend(sup_mod.score_pairs_for_record(part, q, cands))
        sup_mod.write_score_requests(pairs, args.emit_requests)
        logger.info("wrote %d score requests -> %s", len(pairs), args.emit_requests)
        return 0

    provider: Optional[sup_mod.ScoringProvider] = None
    provider_name = "none"
    if cfg.flavor == "sem":
        provider = _make_provider(args.provider, cfg)
        provider_name = provider.name
    records: list[sup_mod.SupervisionRecord] = []
    for part in parts:
        records.extend(
            sup_mod.build_records_for_partition(
                part, cfg.w, flavor=cfg.flavor, provider=provider, n_cand=cfg.n_cand
            )
        )
    sup_mod.write_records(
        records, args.out, flavor=cfg.flavor, w=cfg.w, m=cfg.m,
        n_cand=cfg.n_cand, provider_name=provider_name,
    )
    logger.info("wrote %d supervision records (%s) -> %s", len(records), cfg.flavor, args.out)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    provider = _make_provider(args.provider, cfg)
    n = sup_mod.serve_score_requests(provider, args.requests, args.responses)
    logger.info("scored %d requests -> %s", n, args.responses)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    run_dir = resolve_run_dir(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    frozen = _frozen_config_dict(cfg)
    config_path = run_dir / "config.json"
    if config_path.exists():
        stored = json.loads(config_path.read_text(encoding="utf-8"))
        if stored != frozen:
            bad = sorted(k for k in set(stored) | set(frozen) if stored.get(k) != frozen.get(k))
            raise SystemExit(f"run config mismatch in {config_path} on keys: {', '.join(bad)}")
    else:
        config_path.write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    docs = _load_docs(args.corpus, cfg)
    records = None
    if cfg.mode == "rpt":
        if not args.records:
            raise SystemExit("mode 'rpt' requires --records")
        records = _load_records(args.records)

    ckpt_path = run_dir / "checkpoint.bin"
    tcfg = cfg.train_config()
    if ckpt_path.exists():
        trainer = train_mod.restore_trainer(ckpt_path, tcfg, docs, records)
        logger.info("resumed run at step %d from %s", trainer.step_idx, ckpt_path)
    else:
        trainer = Trainer(tcfg, docs, records)
    if trainer.step_idx >= cfg.steps:
        logger.info("run already complete at step %d", trainer.step_idx)
        return 0
    n_steps = cfg.steps - trainer.step_idx
    if args.limit_steps is not None:
        n_steps = min(n_steps, args.limit_steps)
    rows = trainer.run(n_steps=n_steps, metrics_path=run_dir / "metrics.jsonl")
    train_mod.save_trainer(ckpt_path, trainer)
    last = rows[-1]
    logger.info(
        "finished %d steps (lm %.4f, ret %.4f, %d skipped) -> %s",
        trainer.step_idx, last.lm_loss, last.ret_loss, trainer.skipped, ckpt_path,
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    model = train_mod.load_model(args.checkpoint, mode=args.mode)
    docs = _load_docs(args.corpus, cfg)
    records = _load_records(args.records) if args.records else None
    report = eval_mod.evaluate(
        model, docs, records=records, source=args.source, k_neighbors=args.neighbors
    )
    if args.oracle:
        if not records:
            raise SystemExit("--oracle requires --records")
        report.oracle_ppl = eval_mod.oracle_eval(model, docs, records, args.neighbors)
    out = args.out or "report.json"
    eval_mod.write_report(report, out)
    logger.info("perplexity %.4f over %d docs -> %s", report.ppl, report.n_docs, out)
    if report.retrieval:
        logger.info("retrieval: %s", json.dumps(report.retrieval["metrics"], sort_keys=True))
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    model = train_mod.load_model(args.checkpoint)
    baseline = train_mod.load_model(args.baseline, mode="txl")
    docs = _load_docs(args.corpus, cfg)
    records = _load_records(args.records)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = model.config.m

    outs_model = eval_mod.document_outputs(model, docs, records=records)
    outs_base = eval_mod.document_outputs(baseline, docs, source="none")

    improvements: dict[tuple[str, int], float] = {}
    base_arr, model_arr = [], []
    for doc, om, ob in zip(docs, outs_model, outs_base):
        nll_m = eval_mod.chunk_mean_nll(om, m)
        nll_b = eval_mod.chunk_mean_nll(ob, m)
        for c in range(1, om.n_chunks):
            b, v = nll_b[c - 1], nll_m[c - 1]
            base_arr.append(b)
            model_arr.append(v)
            if b > 1e-9:
                improvements[(doc.doc_id, c)] = float((b - v) / b)

    impr = eval_mod.improvement_stats(np.asarray(base_arr), np.asarray(model_arr))
    eval_mod.write_improvement_csv(impr, out_dir / "improvement.csv")

    hits: dict[tuple[str, int], bool] = {}
    for doc, om in zip(docs, outs_model):
        by_q = records.get(doc.doc_id, {})
        for q, rec in by_q.items():
            if q in om.selected:
                hits[(doc.doc_id, q + 1)] = bool(set(om.selected[q]) & rec.positive_set())
    sub = eval_mod.subgroup_stats(improvements, hits)
    eval_mod.write_subgroup_csv(sub, out_dir / "subgroup.csv")

    parts = {d.doc_id: corpus_mod.partition(d, m) for d in docs}
    rankings = {
        "learned": eval_mod.learned_rankings(model, docs, records)
        if model.config.mode == "rpt"
        else {},
        "bm25_query": eval_mod.bm25_inference_rankings(parts, records, model.config.w),
        "gold": eval_mod.gold_rankings(records),
    }
    eval_mod.write_overlap_csv(
        eval_mod.overlap_rows(parts, records, rankings), out_dir / "overlap.csv"
    )

    flat_records = [rec for by_q in records.values() for rec in by_q.values()]
    ks = list(range(1, max(len(r.candidates) for r in flat_records) + 1))
    curve = sup_mod.max_target_curve(flat_records, ks)
    eval_mod.write_max_target_csv(curve, out_dir / "max_target_at_k.csv")

    summary = {
        "improvement": {k: impr[k] for k in ("mean", "median", "skew", "frac_improved")},
        "subgroups": sub,
        "max_target_at_k": {str(k): v for k, v in curve[:5]},
        "n_records": len(flat_records),
    }
    (out_dir / "analysis.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info("analysis written to %s", out_dir)
    return 0


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    scfg = synth_mod.SynthConfig(
        n_train=args.train_docs,
        n_test=args.test_docs,
        chunks_per_doc=args.chunks_per_doc,
        n_facts=args.facts,
        n_value_decoys=args.decoys,
        min_gap=args.min_gap,
        seed=args.seed if args.seed is not None else 0,
    )
    train, test = synth_mod.generate_corpus(scfg, args.out)
    logger.info("wrote %d train / %d test documents under %s", len(train), len(test), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (JSON object or key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfretro",
        description="Chunk-wise retrieval-augmented LM: data, supervision, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tokenize and chunk a corpus, write the partition manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-supervision", help="score BM25 candidates and write supervision records")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="records.jsonl")
    p.add_argument("--provider", default="uniform",
                   help="uniform | checkpoint:PATH | responses:REQUESTS,RESPONSES")
    p.add_argument("--flavor", choices=("sem", "lex"), default=None)
    p.add_argument("--emit-requests", metavar="PATH",
                   help="write the score-request file for external scoring and exit")
    _add_config_args(p)
    p.set_defaults(func=cmd_build_supervision)

    p = sub.add_parser("score", help="answer a score-request file with a provider")
    p.add_argument("--provider", required=True)
    p.add_argument("--requests", required=True)
    p.add_argument("--responses", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train (or resume) one run")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--records", help="supervision records (required for mode rpt)")
    p.add_argument("--mode", choices=("txl", "retro", "rpt"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--limit-steps", type=int, default=None,
                   help="optimizer steps to run this invocation (resume later to finish)")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--records")
    p.add_argument("--out")
    p.add_argument("--mode", choices=("txl", "retro", "rpt"), default=None)
    p.add_argument("--source", choices=("none", "self", "bm25", "forced"), default=None)
    p.add_argument("--neighbors", type=int, default=None, help="override retrieved-neighbor count")
    p.add_argument("--oracle", action="store_true",
                   help="also report perplexity with supervision-approved neighbors forced")
    _add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="improvement, subgroup, overlap, and max-target analyses")
    p.add_argument("--checkpoint", required=True, help="retrieval model checkpoint")
    p.add_argument("--baseline", required=True, help="no-retrieval baseline checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("make-synthetic", help="generate the synthetic fact-recall corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train-docs", type=int, default=32)
    p.add_argument("--test-docs", type=int, default=10)
    p.add_argument("--chunks-per-doc", type=int, default=64)
    p.add_argument("--facts", type=int, default=4)
    p.add_argument("--decoys", type=int, default=1, help="wrong-value decoys per fact")
    p.add_argument("--min-gap", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
