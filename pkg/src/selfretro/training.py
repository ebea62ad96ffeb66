"""Joint training of the LM and its retriever.

The total loss is ``lm_loss + alpha_ret * ret_loss``: mean next-token NLL
over all predicted positions in the batch, plus a pairwise ranking loss over
the supervision records, averaged over eligible query chunks. The ranking
loss compares the retriever's scores against the supervision scores with
LambdaRank weighting: for every pair where candidate ``l`` is approved and
out-scores candidate ``j`` under supervision, a margin hinge
``max(0, tau - (s(l) - s(j)))`` is weighted by the (detached) absolute NDCG
change from swapping the two in the retriever's current ranking, with binary
gains (approved = 1).

Four quantities follow schedules with exact endpoint branches: the
teacher-forcing probability (cosine 1 -> 0 over the first 90% of steps), the
retrieval-loss weight (linear 0 -> max over the first 20%), the ranking
margin (linear 0 -> max over all steps), and the learning rate (cosine decay
to 10% of peak). The optimizer tracks the belief in the gradient direction:
its second accumulator holds the squared difference between gradient and
momentum (plus eps each step), with decoupled weight decay and bias
correction; the global gradient norm is clipped before every update and
non-finite gradients skip the update entirely.

Every random choice in a step (data order, dropout, neighbor sampling) is
derived from ``(seed, step)``, so training resumed from a checkpoint
reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import Document
from .modeling import ModelConfig, SelfRetroModel, default_source, run_document
from .supervision import SupervisionRecord

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SRCKPT01"
CHECKPOINT_VERSION = 1

_NP_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL; ``logits`` ``(..., T, V)``, ``targets`` ``(..., T)``."""
    return torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1)
    )


def _ranking_positions(scores: Sequence[float]) -> list[int]:
    """0-based rank of each item when sorted by score descending, ties toward
    the lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    pos = [0] * len(scores)
    for rank, idx in enumerate(order):
        pos[idx] = rank
    return pos


def lambdarank_loss(scores: torch.Tensor, record: SupervisionRecord, tau: float) -> torch.Tensor:
    """LambdaRank-weighted margin loss for one query chunk.

    ``scores`` holds the retriever's scores aligned with
    ``record.candidates``. Zero (exactly) when the approved set is empty or
    every pair satisfies its margin. The NDCG swap weights are constants of
    the current ranking (no gradient flows through them).
    """
    n = len(record.candidates)
    if scores.shape != (n,):
        raise ValueError(f"scores shape {tuple(scores.shape)} != ({n},)")
    positives = record.positive_set()
    loss = scores.new_zeros(())
    if not positives:
        return loss
    gains = [1.0 if j in positives else 0.0 for j in record.candidates]
    idcg = sum(1.0 / math.log2(r + 2) for r in range(len(positives)))
    pos = _ranking_positions([float(s) for s in scores.detach()])
    s_t = record.scores
    for a in range(n):
        if record.candidates[a] not in positives:
            continue
        for b in range(n):
            if s_t[a] <= s_t[b]:
                continue
            weight = (
                abs(gains[a] - gains[b])
                * abs(1.0 / math.log2(pos[a] + 2) - 1.0 / math.log2(pos[b] + 2))
                / idcg
            )
            if weight == 0.0:
                continue
            loss = loss + weight * torch.clamp(tau - (scores[a] - scores[b]), min=0.0)
    return loss


def scheduled_sample(
    predicted: Sequence[int], gold: Sequence[int], p_ss: float, rng: np.random.Generator
) -> tuple[int, ...]:
    """All-or-nothing choice between predicted and supervision-approved
    neighbors. Draws from ``rng`` only when ``p_ss > 0``."""
    if p_ss > 0.0 and rng.random() < p_ss:
        return tuple(gold)
    return tuple(predicted)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass
class Schedules:
    """Per-step values for the four scheduled quantities.

    Endpoints are exact by explicit branch, not by trigonometric rounding:
    ``p_ss(0) == 1``, ``p_ss(ceil(0.9 T)..) == 0``, ``alpha(0) == 0``,
    ``alpha(0.2 T ..) == alpha_max``, ``tau(0) == 0``, ``tau(T) == tau_max``,
    ``lr(0) == lr_max``, ``lr(T) == lr_min_ratio * lr_max``.
    """

    total_steps: int
    lr_max: float = 5e-3
    lr_min_ratio: float = 0.1
    alpha_max: float = 1e-2
    alpha_ramp_frac: float = 0.2
    tau_max: float = 4.0
    ss_frac: float = 0.9
    ss_mode: str = "anneal"  # "anneal" | "one" | "zero"

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.ss_mode not in ("anneal", "one", "zero"):
            raise ValueError(f"unknown ss_mode {self.ss_mode!r}")
        if not 0.0 < self.ss_frac <= 1.0 or not 0.0 < self.alpha_ramp_frac <= 1.0:
            raise ValueError("schedule fractions must lie in (0, 1]")

    def p_ss(self, step: int) -> float:
        if self.ss_mode == "one":
            return 1.0
        if self.ss_mode == "zero":
            return 0.0
        horizon = self.ss_frac * self.total_steps
        if step <= 0:
            return 1.0
        if step >= horizon:
            return 0.0
        return 0.5 * (1.0 + math.cos(math.pi * step / horizon))

    def alpha_ret(self, step: int) -> float:
        ramp = self.alpha_ramp_frac * self.total_steps
        if step <= 0:
            return 0.0
        if step >= ramp:
            return self.alpha_max
        return self.alpha_max * step / ramp

    def tau(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if step >= self.total_steps:
            return self.tau_max
        return self.tau_max * step / self.total_steps

    def lr(self, step: int) -> float:
        lr_min = self.lr_min_ratio * self.lr_max
        if step <= 0:
            return self.lr_max
        if step >= self.total_steps:
            return lr_min
        frac = step / self.total_steps
        return lr_min + 0.5 * (self.lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdaBelief(torch.optim.Optimizer):
    """Adam-like optimizer whose second accumulator tracks the squared
    deviation of the gradient from its momentum (``eps`` added inside the
    accumulator every step), with bias correction and decoupled weight decay.
    """

    def __init__(self, params, lr=5e-3, betas=(0.9, 0.999), eps=1e-16, weight_decay=1e-8):
        if lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_var"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, s = state["exp_avg"], state["exp_avg_var"]
                m.mul_(beta1).add_(g, alpha=1.0 - beta1)
                diff = g - m
                s.mul_(beta2).addcmul_(diff, diff, value=1.0 - beta2).add_(eps)
                m_hat = m / (1.0 - beta1**t)
                s_hat = s / (1.0 - beta2**t)
                if group["weight_decay"]:
                    p.mul_(1.0 - group["lr"] * group["weight_decay"])
                p.add_(m_hat / (s_hat.sqrt() + eps), alpha=-group["lr"])
        return loss


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    step: int
    lm_loss: float
    ret_loss: float
    total: float
    p_ss: float
    alpha_ret: float
    tau: float
    lr: float
    skipped: bool = False

    def metrics_row(self) -> dict:
        return {
            "step": self.step,
            "lm_loss": self.lm_loss,
            "ret_loss": self.ret_loss,
            "p_ss": self.p_ss,
            "alpha_ret": self.alpha_ret,
            "tau": self.tau,
            "lr": self.lr,
        }


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
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

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_docs < 1:
            raise ValueError("steps and batch_docs must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def schedules(self) -> Schedules:
        return Schedules(
            total_steps=self.steps,
            lr_max=self.lr_max,
            lr_min_ratio=self.lr_min_ratio,
            alpha_max=self.alpha_max,
            alpha_ramp_frac=self.alpha_ramp_frac,
            tau_max=self.tau_max,
            ss_frac=self.ss_frac,
            ss_mode=self.ss_mode,
        )


def _mix(*values: int) -> int:
    """splitmix64 over the values; stable stream ids for (seed, step, lane)."""
    x = 0
    for v in values:
        x = (x + int(v) + 0x9E3779B97F4A7C15) % 2**64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        x = z ^ (z >> 31)
    return x


class Trainer:
    """Owns the model, optimizer, schedules, and the step loop.

    ``records`` maps ``doc_id -> query_index -> record`` and is required for
    mode ``rpt`` (scheduled sampling and the ranking loss); modes ``txl`` and
    ``retro`` ignore it.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        docs: Sequence[Document],
        records: Optional[dict[str, dict[int, SupervisionRecord]]] = None,
    ):
        if not docs:
            raise ValueError("no training documents")
        if cfg.model.mode == "rpt" and not records:
            raise ValueError("mode 'rpt' requires supervision records")
        self.cfg = cfg
        self.docs = list(docs)
        self.records = records or {}
        torch.manual_seed(_mix(cfg.seed, 0xA11CE))
        self.model = SelfRetroModel(cfg.model)
        self.opt = AdaBelief(
            self.model.parameters(),
            lr=cfg.lr_max,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.sched = cfg.schedules()
        self.step_idx = 0
        self.skipped = 0

    def train_step(self) -> LossBreakdown:
        cfg = self.cfg
        s = self.step_idx
        torch.manual_seed(_mix(cfg.seed, s, 1))  # dropout stream
        rng = np.random.default_rng(_mix(cfg.seed, s, 2))  # data + neighbor sampling
        p_ss = self.sched.p_ss(s)
        alpha = self.sched.alpha_ret(s)
        tau = self.sched.tau(s)
        lr = self.sched.lr(s)
        self.model.train()

        picks = rng.integers(0, len(self.docs), size=cfg.batch_docs)
        nll_sum = None
        n_positions = 0
        ret_terms: list[torch.Tensor] = []
        for di in picks:
            doc = self.docs[int(di)]
            doc_records = self.records.get(doc.doc_id, {})
            fw = run_document(
                self.model,
                doc.tokens,
                records=doc_records,
                p_ss=p_ss if cfg.model.mode == "rpt" else 0.0,
                sample_rng=rng,
                bm25_query="query_target",
                collect_ret_scores=cfg.model.mode == "rpt",
            )
            nll_sum = fw.nll_sum if nll_sum is None else nll_sum + fw.nll_sum
            n_positions += fw.n_positions
            for record, scores in fw.ret_scores:
                ret_terms.append(lambdarank_loss(scores, record, tau))

        lm = nll_sum / max(n_positions, 1)
        if ret_terms:
            ret = torch.stack(ret_terms).mean()
        else:
            ret = lm.new_zeros(())
        total = lm + alpha * ret

        self.opt.zero_grad(set_to_none=True)
        total.backward()
        finite = all(
            torch.isfinite(p.grad).all() for p in self.model.parameters() if p.grad is not None
        )
        skipped = not finite
        if finite:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.clip_norm)
            for group in self.opt.param_groups:
                group["lr"] = lr
            self.opt.step()
        else:
            self.skipped += 1
            logger.warning("step %d: non-finite gradients, update skipped", s)

        self.step_idx += 1
        return LossBreakdown(
            step=s,
            lm_loss=float(lm.detach()),
            ret_loss=float(ret.detach()),
            total=float(total.detach()),
            p_ss=p_ss,
            alpha_ret=alpha,
            tau=tau,
            lr=lr,
            skipped=skipped,
        )

    def run(self, n_steps: Optional[int] = None, metrics_path: Optional[str | Path] = None) -> list[LossBreakdown]:
        """Run until ``cfg.steps`` (or ``n_steps`` more), appending metrics rows."""
        target = self.step_idx + n_steps if n_steps is not None else self.cfg.steps
        out = []
        fh = None
        if metrics_path is not None:
            path = Path(metrics_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fh = path.open("a", encoding="utf-8")
        try:
            while self.step_idx < target:
                row = self.train_step()
                out.append(row)
                if fh is not None:
                    fh.write(json.dumps(row.metrics_row(), sort_keys=True) + "\n")
        finally:
            if fh is not None:
                fh.close()
        return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _tensor_payload(t: torch.Tensor) -> tuple[dict, bytes]:
    arr = t.detach().cpu().contiguous().numpy()
    if arr.dtype == np.float32:
        dtype = "float32"
    elif arr.dtype == np.float64:
        dtype = "float64"
    elif arr.dtype == np.int64:
        dtype = "int64"
    else:
        raise ValueError(f"unsupported tensor dtype {arr.dtype}")
    raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    return {"dtype": dtype, "shape": list(arr.shape), "nbytes": len(raw)}, raw


def save_checkpoint(
    path: str | Path,
    model: SelfRetroModel,
    optimizer: Optional[AdaBelief] = None,
    train_state: Optional[dict] = None,
) -> None:
    """Write a deterministic binary checkpoint (same state -> same bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, torch.Tensor]] = sorted(model.state_dict().items())
    opt_steps: dict[str, int] = {}
    if optimizer is not None:
        name_of = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = name_of[id(p)]
                opt_steps[name] = state["step"]
                tensors.append((f"opt.{name}.exp_avg", state["exp_avg"]))
                tensors.append((f"opt.{name}.exp_avg_var", state["exp_avg_var"]))
        tensors = sorted(tensors)
    metas = []
    payloads = []
    for name, t in tensors:
        meta, raw = _tensor_payload(t)
        meta["name"] = name
        metas.append(meta)
        payloads.append(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "train_state": train_state or {},
        "opt_steps": {k: opt_steps[k] for k in sorted(opt_steps)},
        "tensors": metas,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read header and tensors; validates magic and version."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        tensors: dict[str, torch.Tensor] = {}
        for meta in header["tensors"]:
            raw = fh.read(meta["nbytes"])
            if len(raw) != meta["nbytes"]:
                raise ValueError(f"truncated checkpoint: {path}")
            arr = np.frombuffer(raw, dtype=np.dtype(_NP_DTYPES[meta["dtype"]]).newbyteorder("<"))
            arr = arr.reshape(meta["shape"]).astype(_NP_DTYPES[meta["dtype"]])
            tensors[meta["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_model(path: str | Path, mode: Optional[str] = None) -> SelfRetroModel:
    """Rebuild a model from a checkpoint; ``mode`` optionally overrides the
    stored operating mode (the parameter set is mode-independent)."""
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig(**header["config"])
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    model = SelfRetroModel(cfg)
    state = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model.load_state_dict(state)
    return model


def save_trainer(path: str | Path, trainer: Trainer) -> None:
    train_state = {
        "step_idx": trainer.step_idx,
        "skipped": trainer.skipped,
        "seed": trainer.cfg.seed,
        "steps": trainer.cfg.steps,
    }
    save_checkpoint(path, trainer.model, trainer.opt, train_state)


def restore_trainer(
    path: str | Path,
    cfg: TrainConfig,
    docs: Sequence[Document],
    records: Optional[dict[str, dict[int, SupervisionRecord]]] = None,
) -> Trainer:
    """Rebuild a trainer mid-run. The stored model configuration must match
    ``cfg.model`` exactly; mismatches are an error naming the keys."""
    header, tensors = read_checkpoint(path)
    stored = header["config"]
    wanted = asdict(cfg.model)
    if stored != wanted:
        bad = sorted(k for k in set(stored) | set(wanted) if stored.get(k) != wanted.get(k))
        raise ValueError(f"checkpoint config mismatch on keys: {', '.join(bad)}")
    trainer = Trainer(cfg, docs, records)
    model_state = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    trainer.model.load_state_dict(model_state)
    params = dict(trainer.model.named_parameters())
    for name, step_count in header["opt_steps"].items():
        p = params[name]
        trainer.opt.state[p] = {
            "step": int(step_count),
            "exp_avg": tensors[f"opt.{name}.exp_avg"].clone(),
            "exp_avg_var": tensors[f"opt.{name}.exp_avg_var"].clone(),
        }
    ts = header.get("train_state", {})
    trainer.step_idx = int(ts.get("step_idx", 0))
    trainer.skipped = int(ts.get("skipped", 0))
    return trainer
