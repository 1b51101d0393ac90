"""Small fixtures shared by several test modules."""

from __future__ import annotations

import copy
import dataclasses

import numpy as np
import torch

from mmembed.backbone import Backbone, BackboneConfig
from mmembed.contrastive import ContrastiveInstance
from oracles import random_sequence

TINY = BackboneConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, vocab_size=32, d_patch=8, max_len=64)


def tiny_backbone(seed=0, dtype="float32", **overrides) -> Backbone:
    cfg = dataclasses.replace(TINY, dtype=dtype, **overrides)
    torch.manual_seed(seed)
    return Backbone(cfg)


def as_float64(module):
    """Deep copy promoted to double precision, config included when present."""
    out = copy.deepcopy(module).double()
    if hasattr(out, "config") and isinstance(out.config, BackboneConfig):
        out.config = dataclasses.replace(out.config, dtype="float64")
    return out


def random_instances(rng, n, task="t", k=2, d_patch=8, vocab_size=32, prefix="i"):
    out = []
    for b in range(n):
        q = random_sequence(rng, vocab_size, d_patch, n_text=4, images=())
        pos = random_sequence(rng, vocab_size, d_patch, n_text=3, images=(4,))
        negs = [random_sequence(rng, vocab_size, d_patch, n_text=3, images=(4,)) for _ in range(k)]
        out.append(ContrastiveInstance(q, pos, negs, task, f"{prefix}{b}"))
    return out


def seeded_rng(seed=0):
    return np.random.default_rng(seed)
