"""Cosine retrieval with Precision@1 and NDCG@k."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import Backbone
from .contrastive import embed
from .errors import EvaluationError, InputError
from .files import iter_jsonl
from .sequence import InterleavedSequence

log = logging.getLogger(__name__)

Embedder = Callable[[Sequence[InterleavedSequence]], np.ndarray]


@dataclass
class RetrievalTask:
    name: str
    queries: dict[str, InterleavedSequence]
    pool: dict[str, InterleavedSequence]
    judgments: dict[str, set[str]]
    candidates: dict[str, list[str]] | None = None  # per-query candidate subsets

    def validate(self) -> None:
        if not self.pool:
            raise InputError(f"task {self.name}: empty candidate pool")
        for qid, rel in self.judgments.items():
            missing = rel - self.pool.keys()
            if missing:
                raise EvaluationError(f"task {self.name}: query {qid} judged doc(s) {sorted(missing)} not in pool")
        if self.candidates:
            for qid, cands in self.candidates.items():
                if set(cands) - self.pool.keys():
                    raise EvaluationError(f"task {self.name}: query {qid} lists candidates outside the pool")

    @classmethod
    def from_dir(cls, path: str | Path, d_patch: int, name: str | None = None) -> "RetrievalTask":
        """Load ``queries.jsonl``, ``pool.jsonl`` and ``qrels.jsonl`` from a directory."""
        path = Path(path)
        queries = {rec["id"]: InterleavedSequence.from_json(rec["sequence"], d_patch, id=rec["id"])
                   for _, rec in iter_jsonl(path / "queries.jsonl")}
        pool = {rec["id"]: InterleavedSequence.from_json(rec["sequence"], d_patch, id=rec["id"])
                for _, rec in iter_jsonl(path / "pool.jsonl")}
        judgments: dict[str, set[str]] = {}
        candidates: dict[str, list[str]] = {}
        for _, rec in iter_jsonl(path / "qrels.jsonl"):
            judgments.setdefault(rec["query_id"], set()).update(rec["relevant"])
            if "candidates" in rec:
                candidates[rec["query_id"]] = list(rec["candidates"])
        task = cls(name or path.name, queries, pool, judgments, candidates or None)
        task.validate()
        return task


@dataclass
class RankedList:
    query_id: str
    doc_ids: list[str]
    scores: list[float] = field(default_factory=list)


def backbone_embedder(backbone: Backbone, mode: str = "bidirectional", batch_size: int = 64) -> Embedder:
    def fn(seqs: Sequence[InterleavedSequence]) -> np.ndarray:
        out = []
        with torch.no_grad():
            for start in range(0, len(seqs), batch_size):
                out.append(embed(backbone, list(seqs[start : start + batch_size]), mode).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, backbone.config.d_model))

    return fn


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InputError(f"zero-norm {what} embedding")
    return x / norms


def rank_embeddings(
    query_ids: Sequence[str],
    q: np.ndarray,
    doc_ids: Sequence[str],
    d: np.ndarray,
    candidates: dict[str, list[str]] | None = None,
) -> dict[str, RankedList]:
    """Descending cosine, ties broken by ascending doc id."""
    if len(doc_ids) == 0:
        raise InputError("empty candidate pool")
    sims = _unit_rows(np.asarray(q, dtype=np.float64), "query") @ _unit_rows(np.asarray(d, dtype=np.float64), "document").T
    col = {did: j for j, did in enumerate(doc_ids)}
    # rank of each id in sorted order gives an integer tie-break key
    id_rank = np.empty(len(doc_ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(doc_ids, dtype=object), kind="stable")] = np.arange(len(doc_ids))
    out = {}
    for i, qid in enumerate(query_ids):
        cols = np.arange(len(doc_ids)) if not candidates or qid not in candidates else np.array([col[c] for c in candidates[qid]])
        s = sims[i, cols]
        order = np.lexsort((id_rank[cols], -s))
        out[qid] = RankedList(qid, [doc_ids[cols[j]] for j in order], [float(s[j]) for j in order])
    return out


def rank(
    task: RetrievalTask,
    model: Backbone | Embedder,
    mode: str = "bidirectional",
) -> dict[str, RankedList]:
    task.validate()
    embedder = backbone_embedder(model, mode) if isinstance(model, Backbone) else model
    qids = list(task.queries)
    dids = list(task.pool)
    q = embedder([task.queries[k] for k in qids])
    d = embedder([task.pool[k] for k in dids])
    return rank_embeddings(qids, q, dids, d, task.candidates)


def _judged(ranked: dict[str, RankedList], judgments: dict[str, set[str]]):
    for qid, rl in ranked.items():
        if qid not in judgments:
            raise EvaluationError(f"no relevance judgments for query {qid}")
        yield qid, rl, judgments[qid]


def precision_at_1(ranked: dict[str, RankedList], judgments: dict[str, set[str]]) -> float:
    if not ranked:
        raise EvaluationError("no ranked lists")
    hits = []
    for _, rl, rel in _judged(ranked, judgments):
        if not rl.doc_ids:
            raise EvaluationError(f"empty ranking for query {rl.query_id}")
        hits.append(rl.doc_ids[0] in rel)
    return sum(hits) / len(hits)


def ndcg_query(doc_ids: Sequence[str], relevant: set[str], k: int = 5) -> float:
    """Binary-gain NDCG@k for one ranking."""
    dcg = sum(1.0 / math.log2(r + 2) for r, did in enumerate(doc_ids[:k]) if did in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


def ndcg_at_k(ranked: dict[str, RankedList], judgments: dict[str, set[str]], k: int = 5) -> float:
    if k < 1:
        raise InputError("k must be >= 1")
    scores = []
    for qid, rl, rel in _judged(ranked, judgments):
        if not rel:
            log.warning("query %s has no relevant documents; excluded from NDCG", qid)
            continue
        scores.append(ndcg_query(rl.doc_ids, rel, k))
    if not scores:
        raise EvaluationError("no query with relevant documents")
    return sum(scores) / len(scores)


def evaluate(task: RetrievalTask, model: Backbone | Embedder, mode: str = "bidirectional", k: int = 5):
    """Results record plus per-query detail rows."""
    ranked = rank(task, model, mode)
    record = {
        "task": task.name,
        "P@1": precision_at_1(ranked, task.judgments),
        f"NDCG@{k}": ndcg_at_k(ranked, task.judgments, k),
        "n_queries": len(ranked),
    }
    detail = []
    for qid, rl in ranked.items():
        rel = task.judgments[qid]
        detail.append({
            "task": task.name,
            "query_id": qid,
            "top": rl.doc_ids[:k],
            "scores": rl.scores[:k],
            "hit@1": rl.doc_ids[0] in rel,
            f"ndcg@{k}": ndcg_query(rl.doc_ids, rel, k) if rel else None,
        })
    return record, detail
