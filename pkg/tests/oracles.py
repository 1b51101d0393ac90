"""Independent reference computations used by the tests.

Nothing here calls into the code paths it is used to check: gradients are
compared against central differences of the loss, packing against exhaustive
assignment, metrics against hand-rolled loops.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from mmembed.sequence import N_SPECIAL, InterleavedSequence


def random_sequence(rng, vocab_size=32, d_patch=8, n_text=5, images=(4,), text_first=True, id=None):
    """Text span and image spans, interleaved text/image/text/... ."""
    text = rng.integers(N_SPECIAL, vocab_size, size=n_text).tolist()
    segs = []
    chunks = np.array_split(np.array(text, dtype=np.int64), len(images) + 1)
    for k in range(len(images) + 1):
        if text_first and chunks[k].size:
            segs.append(("text", chunks[k].tolist()))
        if k < len(images):
            segs.append(("image", rng.standard_normal((images[k], d_patch))))
        if not text_first and chunks[k].size:
            segs.append(("text", chunks[k].tolist()))
    return InterleavedSequence.from_segments(segs, d_patch, id=id)


def central_difference(loss_fn, param: torch.Tensor, index: tuple, h: float) -> float:
    """(L(p + h e_i) - L(p - h e_i)) / 2h with in-place perturbation of ``param``."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = loss_fn().item()
        param[index] = orig - h
        down = loss_fn().item()
        param[index] = orig
    return (up - down) / (2 * h)


def richardson_difference(loss_fn, param, index, h):
    """Fourth-order accurate derivative from central differences at h and h/2."""
    d1 = central_difference(loss_fn, param, index, h)
    d2 = central_difference(loss_fn, param, index, h / 2)
    return (4 * d2 - d1) / 3


def gradient_check(loss_fn, named_params, grads, n_probes, rng, h, floor=0.0):
    """Relative errors |g - fd| / max(|g|, |fd|, floor) on random coordinates.

    Probes are spread across parameters proportionally to their size, with at
    least one probe per parameter tensor.
    """
    named = list(named_params)
    sizes = np.array([p.numel() for _, p in named], dtype=float)
    counts = np.maximum(1, np.round(n_probes * sizes / sizes.sum()).astype(int))
    results = []
    for (name, p), k in zip(named, counts):
        flat = rng.choice(p.numel(), size=min(k, p.numel()), replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), tuple(p.shape))
            fd = richardson_difference(loss_fn, p, idx, h)
            g = grads[name][idx].item()
            denom = max(abs(g), abs(fd), floor)
            err = 0.0 if denom == 0 else abs(g - fd) / denom
            results.append((name, idx, g, fd, err))
    return results


def brute_force_makespan(costs, m) -> float:
    """Optimal max load over all m**n assignments (assignment k is k written in base m)."""
    costs = np.asarray(costs, dtype=float)
    n = costs.size
    if n == 0:
        return 0.0
    codes = np.arange(m ** n, dtype=np.int64)
    assign = (codes[:, None] // (m ** np.arange(n, dtype=np.int64))[None, :]) % m
    loads = np.stack([np.where(assign == w, costs, 0.0).sum(axis=1) for w in range(m)], axis=1)
    return float(loads.max(axis=1).min())


def brute_force_top1(q: np.ndarray, docs: list[np.ndarray], doc_ids: list[str]) -> str:
    best_id, best = None, -math.inf
    for did, d in zip(doc_ids, docs):
        c = float(np.dot(q, d) / (np.linalg.norm(q) * np.linalg.norm(d)))
        if c > best or (c == best and did < best_id):
            best_id, best = did, c
    return best_id


def brute_force_ndcg(q, docs, doc_ids, relevant, k=5) -> float:
    scored = []
    for did, d in zip(doc_ids, docs):
        scored.append((-float(np.dot(q, d) / (np.linalg.norm(q) * np.linalg.norm(d))), did))
    scored.sort()
    dcg = 0.0
    for r, (_, did) in enumerate(scored[:k], start=1):
        if did in relevant:
            dcg += 1 / math.log2(r + 1)
    idcg = sum(1 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


def fd_floor(loss_value: float, h: float, rtol: float, dtype=np.float64, factor: float = 10.0) -> float:
    """Smallest derivative a central difference resolves to relative ``rtol``.

    Round-off in L(p+h) - L(p-h) is about eps*|L|, so the quotient carries an
    absolute error near eps*|L|/h. Coordinates below that scale (structurally
    zero gradients, e.g. the key bias under softmax) can only be checked in
    absolute terms, which the floor in the relative-error denominator does.
    """
    eps = float(np.finfo(dtype).eps)
    return factor * eps * max(1.0, abs(loss_value)) / (h * rtol)
