"""Contrastive fine-tuning with hard and in-batch negatives."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, InputError, NumericError
from .sequence import InterleavedSequence


@dataclass
class ClConfig:
    tau: float = 0.03
    batch_size: int = 32
    lr: float = 1e-5
    steps: int = 2000
    n_hard_negatives: int = 2
    dedup: bool = True
    task_batching: bool = True
    drop_last: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 1 or self.steps < 0 or self.lr < 0 or self.n_hard_negatives < 0:
            raise ConfigError("invalid batch_size / steps / lr / n_hard_negatives")


@dataclass(eq=False)
class ContrastiveInstance:
    query: InterleavedSequence
    positive: InterleavedSequence
    negatives: list[InterleavedSequence]
    task_id: str
    instance_id: str = ""
    positive_id: str = ""
    negative_ids: list[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.task_id:
            raise InputError("task_id must be nonempty")
        if not self.negative_ids:
            self.negative_ids = [f"{self.instance_id}/neg{k}" for k in range(len(self.negatives))]
        if not self.positive_id:
            self.positive_id = f"{self.instance_id}/pos"
        if len(self.negative_ids) != len(self.negatives):
            raise InputError("one id per hard negative required")
        if self.positive_id in self.negative_ids:
            raise InputError(f"instance {self.instance_id}: positive id reused as a hard negative id")

    @property
    def documents(self) -> list[InterleavedSequence]:
        return [self.positive, *self.negatives]

    @property
    def document_ids(self) -> list[str]:
        return [self.positive_id, *self.negative_ids]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "query": self.query.to_json(),
            "positive": self.positive.to_json(),
            "negatives": [n.to_json() for n in self.negatives],
            "ids": {"instance": self.instance_id, "positive": self.positive_id, "negatives": self.negative_ids},
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj: dict, d_patch: int) -> "ContrastiveInstance":
        try:
            ids = obj.get("ids", {})
            inst = ids.get("instance", "")
            return cls(
                query=InterleavedSequence.from_json(obj["query"], d_patch, id=f"{inst}/query"),
                positive=InterleavedSequence.from_json(obj["positive"], d_patch, id=ids.get("positive")),
                negatives=[
                    InterleavedSequence.from_json(n, d_patch, id=nid)
                    for n, nid in zip(obj.get("negatives", []), ids.get("negatives", [None] * len(obj.get("negatives", []))))
                ],
                task_id=obj["task_id"],
                instance_id=inst,
                positive_id=ids.get("positive", ""),
                negative_ids=list(ids.get("negatives", [])),
                split=obj.get("split", "train"),
            )
        except KeyError as exc:
            raise InputError(f"contrastive instance is missing field {exc}") from None


# ---------------------------------------------------------------------------
# embeddings and similarity
# ---------------------------------------------------------------------------


def embed_bidirectional(backbone: Backbone, seqs: InterleavedSequence | Sequence[InterleavedSequence]) -> torch.Tensor:
    """Mean of bidirectional hidden states over real (non-padding) positions."""
    single = isinstance(seqs, InterleavedSequence)
    batch = backbone.collate([seqs] if single else list(seqs))
    mask = batch.attention_mask
    if not mask.any(dim=1).all():
        raise InputError("all-padding sequence cannot be embedded")
    hidden = backbone(batch, mode="bidirectional")
    m = mask[..., None].to(hidden.dtype)
    emb = (hidden * m).sum(dim=1) / m.sum(dim=1)
    return emb[0] if single else emb


def embed_causal(backbone: Backbone, seqs: InterleavedSequence | Sequence[InterleavedSequence]) -> torch.Tensor:
    """Causal hidden state at the final EOS position (EOS appended when absent)."""
    single = isinstance(seqs, InterleavedSequence)
    seqs = [s.with_eos() for s in ([seqs] if single else seqs)]
    batch = backbone.collate(seqs)
    hidden = backbone(batch, mode="causal")
    last = batch.lengths - 1
    emb = hidden[torch.arange(len(seqs)), last]
    return emb[0] if single else emb


def embed(backbone: Backbone, seqs, mode: str = "bidirectional") -> torch.Tensor:
    if mode == "bidirectional":
        return embed_bidirectional(backbone, seqs)
    if mode == "causal":
        return embed_causal(backbone, seqs)
    raise InputError(f"unknown embedding mode {mode!r}")


def _check_norms(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1)
    if (norms == 0).any():
        raise InputError(f"zero-norm {what} embedding; cosine undefined")
    return norms


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine of the last dimension, broadcasting leading ones."""
    na, nb = _check_norms(a, "first"), _check_norms(b, "second")
    return (a * b).sum(-1) / (na * nb)


def log_similarity(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """log Phi(a, b) = cos(a, b) / tau."""
    if not tau > 0:
        raise InputError("tau must be positive")
    return cosine(a, b) / tau


def similarity(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """Phi(a, b) = exp(cos(a, b) / tau). May overflow for small tau; prefer log_similarity."""
    return torch.exp(log_similarity(a, b, tau))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class InfoNceOutput:
    loss: torch.Tensor
    per_query: torch.Tensor
    cos: torch.Tensor  # (B, D) query x document cosines
    candidates: torch.Tensor  # (B, D) bool, documents in each query's denominator
    positive_col: torch.Tensor  # (B,)


def candidate_mask(
    owner: Sequence[int], doc_ids: Sequence[str], positive_col: Sequence[int], dedup: bool = True
) -> torch.Tensor:
    """(B, D) bool: own documents plus other instances' documents, minus copies of the own positive."""
    B = len(positive_col)
    own = torch.tensor(list(owner))[None, :] == torch.arange(B)[:, None]
    if not dedup:
        return torch.ones_like(own)
    codes: dict[str, int] = {}
    id_codes = torch.tensor([codes.setdefault(i, len(codes)) for i in doc_ids])
    same_as_positive = id_codes[None, :] == id_codes[list(positive_col)][:, None]
    return own | ~same_as_positive


def info_nce(
    q: torch.Tensor,
    docs: torch.Tensor,
    owner: Sequence[int],
    doc_ids: Sequence[str],
    positive_col: Sequence[int],
    tau: float,
    dedup: bool = True,
) -> InfoNceOutput:
    """Contrastive loss from precomputed embeddings, evaluated with log-sum-exp.

    ``docs`` rows are all documents of the batch; ``owner[j]`` is the instance
    that contributed row j and ``positive_col[b]`` the row of instance b's
    positive.
    """
    if q.shape[0] == 0:
        raise InputError("empty contrastive batch")
    _check_norms(q, "query")
    _check_norms(docs, "document")
    qn = q / q.norm(dim=-1, keepdim=True)
    dn = docs / docs.norm(dim=-1, keepdim=True)
    cos = qn @ dn.T
    cand = candidate_mask(owner, doc_ids, positive_col, dedup).to(q.device)
    logits = (cos / tau).masked_fill(~cand, float("-inf"))
    pos_cols = torch.as_tensor(list(positive_col), dtype=torch.long)
    pos_logit = logits[torch.arange(q.shape[0]), pos_cols]
    per_query = torch.logsumexp(logits, dim=1) - pos_logit
    return InfoNceOutput(per_query.mean(), per_query, cos, cand, pos_cols)


def _layout(batch: Sequence[ContrastiveInstance]):
    docs, owner, ids, pos_col = [], [], [], []
    for b, inst in enumerate(batch):
        pos_col.append(len(docs))
        docs.extend(inst.documents)
        ids.extend(inst.document_ids)
        owner.extend([b] * len(inst.documents))
    return docs, owner, ids, pos_col


def contrastive_loss(
    batch: Sequence[ContrastiveInstance],
    backbone: Backbone,
    tau: float = 0.03,
    dedup: bool = True,
) -> InfoNceOutput:
    if not batch:
        raise InputError("empty contrastive batch")
    docs, owner, ids, pos_col = _layout(batch)
    q = embed_bidirectional(backbone, [inst.query for inst in batch])
    d = embed_bidirectional(backbone, docs)
    return info_nce(q, d, owner, ids, pos_col, tau, dedup)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    task_id: str | None  # None when the batch mixes tasks
    instances: list[ContrastiveInstance]
    partial: bool = False

    def __len__(self) -> int:
        return len(self.instances)


def task_aware_batches(
    dataset: Sequence[ContrastiveInstance],
    batch_size: int,
    rng: np.random.Generator,
    drop_last: bool = False,
    task_aware: bool = True,
) -> Iterator[Batch]:
    """One epoch of batches.

    With ``task_aware`` every batch holds a single task: instances are shuffled
    within each task, chunked, and the resulting batches are emitted in a
    shuffled order. Otherwise the whole dataset is shuffled and chunked.
    """
    if batch_size < 2:
        warnings.warn("batch_size < 2 leaves no in-batch negatives", stacklevel=2)
    batches: list[Batch] = []

    def chunk(items: list[ContrastiveInstance], task: str | None) -> None:
        for start in range(0, len(items), batch_size):
            part = items[start : start + batch_size]
            partial = len(part) < batch_size
            if partial and drop_last:
                continue
            tid = task if task is not None else (part[0].task_id if len({i.task_id for i in part}) == 1 else None)
            batches.append(Batch(tid, part, partial))

    if task_aware:
        tasks: dict[str, list[ContrastiveInstance]] = {}
        for inst in dataset:
            tasks.setdefault(inst.task_id, []).append(inst)
        for task in sorted(tasks):
            items = tasks[task]
            perm = rng.permutation(len(items))
            chunk([items[i] for i in perm], task)
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    else:
        perm = rng.permutation(len(dataset))
        chunk([dataset[i] for i in perm], None)
    yield from batches


def batch_stream(
    dataset: Sequence[ContrastiveInstance],
    config: ClConfig,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """Endless sequence of epochs."""
    if not dataset:
        raise InputError("empty contrastive dataset")
    while True:
        emitted = False
        for b in task_aware_batches(dataset, config.batch_size, rng, config.drop_last, config.task_batching):
            emitted = True
            yield b
        if not emitted:
            raise InputError("dataset too small to fill a single batch with drop_last")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ClState:
    backbone: Backbone
    optimizer: torch.optim.Optimizer
    config: ClConfig
    step: int = 0

    @classmethod
    def create(
        cls,
        backbone_config: BackboneConfig,
        config: ClConfig,
        seed: int | None = None,
        init: ckpt_io.Checkpoint | None = None,
    ) -> "ClState":
        seed = config.seed if seed is None else seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            backbone = Backbone(backbone_config)
        if init is not None:
            ckpt_io.load_module_state(backbone, init.subset("backbone"))
        opt = torch.optim.Adam(backbone.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        return cls(backbone, opt, config)

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        tensors = ckpt_io.state_to_arrays("backbone", self.backbone)
        return ckpt_io.Checkpoint(self.backbone.config, tensors, {"kind": "cl", "step": str(self.step)})


def cl_train_step(state: ClState, batch: Batch | Sequence[ContrastiveInstance]) -> dict:
    """One Adam step on the contrastive loss of ``batch``.

    ``cos_neg`` averages the cosine over every negative in each query's
    denominator (hard and in-batch).
    """
    instances = batch.instances if isinstance(batch, Batch) else list(batch)
    cfg = state.config
    state.optimizer.zero_grad(set_to_none=True)
    try:
        out = contrastive_loss(instances, state.backbone, cfg.tau, cfg.dedup)
    except NumericError as exc:
        raise NumericError(f"step {state.step}: {exc}", layer=exc.layer) from exc
    if not torch.isfinite(out.loss):
        bad = [instances[i].instance_id for i in torch.nonzero(~torch.isfinite(out.per_query)).flatten().tolist()]
        raise NumericError(f"step {state.step}: non-finite contrastive loss for instances {bad}",
                           sequence_id=bad[0] if bad else None)
    out.loss.backward()
    grad_norm = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in state.backbone.parameters() if p.grad is not None))
    state.optimizer.step()
    state.step += 1
    with torch.no_grad():
        cos = out.cos.detach()
        rows = torch.arange(cos.shape[0])
        cos_pos = cos[rows, out.positive_col]
        neg_mask = out.candidates.clone()
        neg_mask[rows, out.positive_col] = False
        n_neg = neg_mask.sum()
        cos_neg = float((cos * neg_mask).sum() / n_neg) if n_neg > 0 else None
    return {
        "step": state.step,
        "loss": out.loss.item(),
        "cos_pos": float(cos_pos.mean()),
        "cos_neg": cos_neg,
        "grad_norm": grad_norm,
        "lr": state.optimizer.param_groups[0]["lr"],
        "task_id": batch.task_id if isinstance(batch, Batch) else None,
        "batch_size": len(instances),
    }
