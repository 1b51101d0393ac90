"""Compute-cost model and load-balanced assignment of sequences to logical workers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, InputError
from .sequence import InterleavedSequence


@dataclass(frozen=True)
class CostModel:
    """cost(seq) = scale * (n_text + patch_weight * n_patches) ** gamma."""

    gamma: float = 1.0
    patch_weight: float = 1.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.gamma <= 0 or self.patch_weight <= 0 or self.scale <= 0:
            raise ConfigError("cost model parameters must be positive")


def compute_cost(seq: InterleavedSequence | int, model: CostModel = CostModel()) -> float:
    if isinstance(seq, InterleavedSequence):
        n_patch = int(seq.is_image.sum())
        n_text = len(seq) - n_patch
    else:
        n_text, n_patch = int(seq), 0
    size = n_text + model.patch_weight * n_patch
    if size <= 0:
        raise InputError("cost of an empty sequence is undefined")
    return model.scale * float(size) ** model.gamma


@dataclass
class PackAssignment:
    n_workers: int
    worker_of: list[int]
    loads: list[float]
    costs: list[float]

    @property
    def max_load(self) -> float:
        return max(self.loads)

    @property
    def min_load(self) -> float:
        return min(self.loads)

    @property
    def idle_workers(self) -> list[int]:
        used = set(self.worker_of)
        return [w for w in range(self.n_workers) if w not in used]

    def groups(self) -> list[list[int]]:
        """Sequence indices per worker, each in input order."""
        out: list[list[int]] = [[] for _ in range(self.n_workers)]
        for i, w in enumerate(self.worker_of):
            out[w].append(i)
        return out


def lpt(costs: Sequence[float], n_workers: int) -> PackAssignment:
    """Longest-processing-time greedy.

    Items go in descending cost order (stable on ties) to the currently
    least-loaded worker (lowest index on ties).
    """
    if n_workers < 1:
        raise ConfigError("need at least one worker")
    costs = [float(c) for c in costs]
    if any(not c > 0 for c in costs):
        raise InputError("all costs must be positive")
    order = sorted(range(len(costs)), key=lambda i: -costs[i])
    loads = [0.0] * n_workers
    worker_of = [-1] * len(costs)
    for i in order:
        w = min(range(n_workers), key=lambda k: (loads[k], k))
        worker_of[i] = w
        loads[w] += costs[i]
    # exact per-worker sums, independent of assignment order
    loads = [math.fsum(c for c, w in zip(costs, worker_of) if w == k) for k in range(n_workers)]
    return PackAssignment(n_workers, worker_of, loads, costs)


def pack(
    sequences: Sequence[InterleavedSequence],
    n_workers: int,
    model: CostModel = CostModel(),
) -> PackAssignment:
    return lpt([compute_cost(s, model) for s in sequences], n_workers)
