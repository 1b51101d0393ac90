"""Continual pre-training with joint masked-token and masked-patch denoising.

Text tokens are replaced by MASK and predicted from the hidden state one
position to the left; image patches are replaced by unit-Gaussian noise and
regressed by a shallow transformer decoder. Both heads read the hidden states
of a single bidirectional forward pass over the doubly corrupted sequence.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .backbone import Backbone, BackboneConfig, Block, init_weights
from .errors import ConfigError, InputError, MaskError, NumericError
from .packing import CostModel, pack
from .sequence import MASK, SPECIAL_IDS, InterleavedSequence, SequenceBatch

log = logging.getLogger(__name__)


@dataclass
class CptConfig:
    p_mlm: float = 0.4
    r_mae: float = 0.5
    w: float = 0.5
    lr: float = 2e-6
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    tie_mlm_head: bool = False
    n_workers: int = 4
    mlm_on: bool = True
    mae_on: bool = True
    max_mask_retries: int = 10

    def __post_init__(self) -> None:
        if not 0 < self.p_mlm < 1:
            raise ConfigError("p_mlm must lie in (0, 1)")
        if not 0 <= self.r_mae < 1:
            raise ConfigError("r_mae must lie in [0, 1)")
        if self.w < 0:
            raise ConfigError("w must be non-negative")
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1 or self.n_workers < 1:
            raise ConfigError("lr, steps must be >= 0; batch_size, n_workers >= 1")


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    mlm_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mae_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed: int | None = None

    def __post_init__(self) -> None:
        self.mlm_indices = np.asarray(self.mlm_indices, dtype=np.int64)
        self.mae_indices = np.asarray(self.mae_indices, dtype=np.int64)


@dataclass(eq=False)
class MaskedSequence:
    corrupted: InterleavedSequence
    original: InterleavedSequence
    plan: MaskPlan

    @property
    def id(self) -> str | None:
        return self.original.id


def mlm_eligible(seq: InterleavedSequence) -> np.ndarray:
    """Text positions > 0 holding a non-special token."""
    pos = seq.text_positions
    pos = pos[pos > 0]
    specials = np.array(sorted(SPECIAL_IDS))
    return pos[~np.isin(seq.token_ids[pos], specials)]


def sample_mlm_mask(
    seq: InterleavedSequence,
    p_mlm: float,
    rng: np.random.Generator,
    force_nonempty: bool = True,
    max_retries: int = 10,
) -> np.ndarray:
    """Independent Bernoulli(p_mlm) selection over eligible text positions.

    An empty draw is retried up to ``max_retries`` times and then replaced by a
    single uniform pick, unless ``force_nonempty`` is off.
    """
    eligible = mlm_eligible(seq)
    if eligible.size == 0:
        raise MaskError(f"sequence {seq.id!r} has no maskable text token")
    for _ in range(1 + (max_retries if force_nonempty else 0)):
        chosen = eligible[rng.random(eligible.size) < p_mlm]
        if chosen.size or not force_nonempty:
            return chosen
    return eligible[[rng.integers(eligible.size)]]


def sample_mae_mask(seq: InterleavedSequence, r_mae: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly floor(r_mae * P) uniformly chosen patches from each image."""
    chosen = []
    for span in seq.image_spans():
        k = math.floor(r_mae * span.size + 1e-9)
        if k:
            chosen.append(np.sort(rng.choice(span, size=k, replace=False)))
    return np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)


def sample_mask_plan(
    seq: InterleavedSequence, config: CptConfig, rng: np.random.Generator
) -> MaskPlan:
    mlm = np.zeros(0, dtype=np.int64)
    if config.mlm_on:
        try:
            mlm = sample_mlm_mask(seq, config.p_mlm, rng, max_retries=config.max_mask_retries)
        except MaskError as exc:
            if seq.text_positions.size:
                log.warning("skipping MLM: %s", exc)
    mae = sample_mae_mask(seq, config.r_mae, rng) if config.mae_on else np.zeros(0, dtype=np.int64)
    return MaskPlan(mlm, mae)


def apply_masks(
    seq: InterleavedSequence, plan: MaskPlan, rng: np.random.Generator
) -> MaskedSequence:
    T = len(seq)
    for name, idx, want_image in (("mlm", plan.mlm_indices, False), ("mae", plan.mae_indices, True)):
        if idx.size and (idx.min() < 0 or idx.max() >= T):
            raise InputError(f"{name} index out of range for length {T}")
        if idx.size and np.any(seq.is_image[idx] != want_image):
            raise InputError(f"{name} index points at the wrong modality")
    corrupted = seq.copy()
    corrupted.token_ids[plan.mlm_indices] = MASK
    if plan.mae_indices.size:
        corrupted.patches[plan.mae_indices] = rng.standard_normal((plan.mae_indices.size, seq.d_patch))
    return MaskedSequence(corrupted=corrupted, original=seq, plan=plan)


def mask_sequences(
    seqs: Sequence[InterleavedSequence], config: CptConfig, rng: np.random.Generator
) -> list[MaskedSequence]:
    return [apply_masks(s, sample_mask_plan(s, config, rng), rng) for s in seqs]


@dataclass
class MaskedBatch:
    """Collated corrupted inputs with flat (row, position) index lists for both masks."""

    inputs: SequenceBatch
    mlm_rows: torch.Tensor
    mlm_pos: torch.Tensor
    mlm_targets: torch.Tensor
    mae_rows: torch.Tensor
    mae_pos: torch.Tensor
    mae_targets: torch.Tensor
    ids: list[str | None]

    @classmethod
    def collate(cls, masked: Sequence[MaskedSequence], dtype: torch.dtype = torch.float32) -> "MaskedBatch":
        inputs = SequenceBatch.collate([m.corrupted for m in masked], dtype=dtype)
        mlm_rows, mlm_pos, mlm_tgt, mae_rows, mae_pos, mae_tgt = [], [], [], [], [], []
        for b, m in enumerate(masked):
            mi, ai = m.plan.mlm_indices, m.plan.mae_indices
            mlm_rows.extend([b] * mi.size)
            mlm_pos.extend(mi.tolist())
            mlm_tgt.extend(m.original.token_ids[mi].tolist())
            mae_rows.extend([b] * ai.size)
            mae_pos.extend(ai.tolist())
            mae_tgt.append(m.original.patches[ai])
        d_patch = inputs.patches.shape[-1]
        mae_arr = np.concatenate(mae_tgt) if mae_tgt else np.zeros((0, d_patch))
        as_long = lambda xs: torch.tensor(xs, dtype=torch.long)  # noqa: E731
        return cls(
            inputs=inputs,
            mlm_rows=as_long(mlm_rows),
            mlm_pos=as_long(mlm_pos),
            mlm_targets=as_long(mlm_tgt),
            mae_rows=as_long(mae_rows),
            mae_pos=as_long(mae_pos),
            mae_targets=torch.from_numpy(mae_arr.reshape(-1, d_patch)).to(dtype),
            ids=[m.id for m in masked],
        )

    @property
    def n_mlm(self) -> int:
        return int(self.mlm_pos.numel())

    @property
    def n_mae(self) -> int:
        return int(self.mae_pos.numel())


def _as_batch(masked, dtype) -> MaskedBatch:
    if isinstance(masked, MaskedBatch):
        return masked
    if isinstance(masked, MaskedSequence):
        masked = [masked]
    return MaskedBatch.collate(masked, dtype=dtype)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


class MlmHead(nn.Module):
    """Linear map from hidden states to vocabulary logits.

    With ``tie_to`` the weight is the token-embedding table of the backbone
    (not re-registered here, so optimizers see it once).
    """

    def __init__(self, d_model: int, vocab_size: int, tie_to: nn.Embedding | None = None):
        super().__init__()
        self.vocab_size = vocab_size
        self._tied = (tie_to,) if tie_to is not None else None
        self.proj = None if tie_to is not None else nn.Linear(d_model, vocab_size)
        self.bias = nn.Parameter(torch.zeros(vocab_size)) if tie_to is not None else None
        if self.proj is not None:
            init_weights(self)

    @property
    def tied(self) -> bool:
        return self._tied is not None

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if self._tied is not None:
            return h @ self._tied[0].weight.T + self.bias
        return self.proj(h)


class MaeDecoder(nn.Module):
    """Two bidirectional transformer blocks and a linear read-out to patch space."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, d_patch: int, n_layers: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(Block(d_model, n_heads, d_ff) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, d_patch)
        init_weights(self)

    def forward(self, hidden: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        allowed = key_mask[:, None, None, :].expand(-1, 1, hidden.shape[1], hidden.shape[1])
        x = hidden
        for block in self.blocks:
            x = block(x, allowed)
        return self.out(self.norm(x))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossTerm:
    loss: torch.Tensor
    count: int
    outputs: torch.Tensor | None = None  # MLM logits or MAE predictions at the masked positions

    @property
    def present(self) -> bool:
        return self.count > 0


def _batched(hidden: torch.Tensor) -> torch.Tensor:
    return hidden[None] if hidden.dim() == 2 else hidden


def mlm_loss(
    hidden: torch.Tensor,
    masked: MaskedBatch | MaskedSequence | Sequence[MaskedSequence],
    head: MlmHead,
    reduction: str = "mean",
) -> LossTerm:
    """Cross-entropy of the original token at each masked position i, predicted from row i-1."""
    hidden = _batched(hidden)
    mb = _as_batch(masked, hidden.dtype)
    if mb.n_mlm == 0:
        return LossTerm(hidden.new_zeros(()), 0)
    if int(mb.mlm_pos.min()) < 1:
        raise InputError("MLM position 0 has no preceding hidden state")
    logits = head(hidden[mb.mlm_rows, mb.mlm_pos - 1])
    loss = F.cross_entropy(logits, mb.mlm_targets, reduction=reduction)
    return LossTerm(loss, mb.n_mlm, logits)


def mae_loss(
    hidden: torch.Tensor,
    masked: MaskedBatch | MaskedSequence | Sequence[MaskedSequence],
    decoder: MaeDecoder,
    reduction: str = "mean",
    key_mask: torch.Tensor | None = None,
) -> LossTerm:
    """Squared error between decoded and original patches, averaged over masked patches and coordinates."""
    hidden = _batched(hidden)
    mb = _as_batch(masked, hidden.dtype)
    if mb.n_mae == 0:
        return LossTerm(hidden.new_zeros(()), 0)
    if key_mask is None:
        key_mask = mb.inputs.attention_mask
    pred = decoder(hidden, key_mask)[mb.mae_rows, mb.mae_pos]
    loss = F.mse_loss(pred, mb.mae_targets.to(pred.dtype), reduction=reduction)
    return LossTerm(loss, mb.n_mae, pred)


@dataclass
class CptLoss:
    loss: torch.Tensor
    mlm: LossTerm
    mae: LossTerm


def cpt_loss(
    masked: MaskedBatch | MaskedSequence | Sequence[MaskedSequence],
    backbone: Backbone,
    head: MlmHead,
    decoder: MaeDecoder,
    w: float = 0.5,
    mlm_on: bool = True,
    mae_on: bool = True,
    normalizers: tuple[int, int] | None = None,
) -> CptLoss:
    """L = L_MLM + w * L_MAE from one bidirectional pass over the corrupted batch.

    ``normalizers`` = (masked-token count, masked-patch count) of the enclosing
    batch; when given, the terms are sums divided by those counts so that
    micro-batch contributions add up to the batch mean.
    """
    mb = _as_batch(masked, backbone.dtype)
    hidden = backbone(mb.inputs, mode="bidirectional")
    zero = hidden.new_zeros(())
    reduction = "sum" if normalizers else "mean"
    mlm = mlm_loss(hidden, mb, head, reduction) if mlm_on else LossTerm(zero, 0)
    mae = mae_loss(hidden, mb, decoder, reduction) if mae_on else LossTerm(zero, 0)
    if normalizers:
        n_mlm, n_mae = normalizers
        d_patch = backbone.config.d_patch
        if mlm.present:
            mlm.loss = mlm.loss / n_mlm
        if mae.present:
            mae.loss = mae.loss / (n_mae * d_patch)
    return CptLoss(mlm.loss + w * mae.loss, mlm, mae)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class CptState:
    backbone: Backbone
    head: MlmHead
    decoder: MaeDecoder
    optimizer: torch.optim.Optimizer
    config: CptConfig
    step: int = 0

    @classmethod
    def create(cls, backbone_config: BackboneConfig, config: CptConfig, seed: int | None = None,
               backbone: Backbone | None = None) -> "CptState":
        seed = config.seed if seed is None else seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            if backbone is None:
                backbone = Backbone(backbone_config)
            bc = backbone.config
            head = MlmHead(bc.d_model, bc.vocab_size, backbone.token_embedding if config.tie_mlm_head else None)
            decoder = MaeDecoder(bc.d_model, bc.n_heads, bc.d_ff, bc.d_patch)
        head.to(bc.torch_dtype)
        decoder.to(bc.torch_dtype)
        params = list(backbone.parameters()) + list(head.parameters()) + list(decoder.parameters())
        opt = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        return cls(backbone, head, decoder, opt, config)

    def modules(self) -> dict[str, nn.Module]:
        return {"backbone": self.backbone, "mlm_head": self.head, "mae_decoder": self.decoder}

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        tensors = {}
        for prefix, module in self.modules().items():
            tensors.update(ckpt_io.state_to_arrays(prefix, module))
        meta = {"kind": "cpt", "step": str(self.step), "tie_mlm_head": str(self.config.tie_mlm_head)}
        return ckpt_io.Checkpoint(self.backbone.config, tensors, meta)

    def load_checkpoint(self, ckpt: ckpt_io.Checkpoint) -> None:
        for prefix, module in self.modules().items():
            ckpt_io.load_module_state(module, ckpt.subset(prefix))


def _micro_batches(
    masked: Sequence[MaskedSequence], n_workers: int, cost_model: CostModel | None
) -> tuple[list[list[MaskedSequence]], list[float]]:
    if n_workers <= 1:
        return [list(masked)], []
    assignment = pack([m.corrupted for m in masked], n_workers, cost_model or CostModel())
    groups = [[masked[i] for i in idx] for idx in assignment.groups()]
    return [g for g in groups if g], assignment.loads


def _find_offender(state: CptState, masked: Sequence[MaskedSequence]) -> str | None:
    cfg = state.config
    with torch.no_grad():
        for m in masked:
            try:
                out = cpt_loss(m, state.backbone, state.head, state.decoder, cfg.w, cfg.mlm_on, cfg.mae_on)
            except NumericError:
                return m.id
            if not torch.isfinite(out.loss):
                return m.id
    return None


def cpt_train_step(
    state: CptState,
    batch: Sequence[MaskedSequence],
    cost_model: CostModel | None = None,
) -> dict:
    """One Adam step on the batch-mean joint loss.

    The batch is split into ``config.n_workers`` cost-balanced micro-batches
    whose gradients are accumulated; the result equals a single pass over the
    whole batch up to float rounding.
    """
    cfg = state.config
    if not batch:
        raise InputError("empty CPT batch")
    n_mlm = sum(m.plan.mlm_indices.size for m in batch) if cfg.mlm_on else 0
    n_mae = sum(m.plan.mae_indices.size for m in batch) if cfg.mae_on else 0
    groups, loads = _micro_batches(batch, cfg.n_workers, cost_model)
    state.optimizer.zero_grad(set_to_none=True)
    total = mlm_total = mae_total = 0.0
    for group in groups:
        try:
            out = cpt_loss(group, state.backbone, state.head, state.decoder, cfg.w,
                           cfg.mlm_on, cfg.mae_on, normalizers=(max(n_mlm, 1), max(n_mae, 1)))
        except NumericError as exc:
            state.optimizer.zero_grad(set_to_none=True)
            raise NumericError(f"step {state.step}: {exc}", layer=exc.layer,
                               sequence_id=_find_offender(state, group)) from exc
        if not torch.isfinite(out.loss):
            state.optimizer.zero_grad(set_to_none=True)
            bad = _find_offender(state, group)
            raise NumericError(f"step {state.step}: non-finite CPT loss (sequence {bad!r})", sequence_id=bad)
        if out.loss.requires_grad:
            out.loss.backward()
        total += out.loss.item()
        mlm_total += out.mlm.loss.item()
        mae_total += out.mae.loss.item()
    grads = [p.grad for group in state.optimizer.param_groups for p in group["params"] if p.grad is not None]
    grad_norm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads)) if grads else 0.0
    if grads:
        state.optimizer.step()
    state.step += 1
    if loads:
        log.debug("step %d worker loads %s", state.step, loads)
    return {
        "step": state.step,
        "loss": total,
        "loss_mlm": mlm_total,
        "loss_mae": mae_total,
        "grad_norm": grad_norm,
        "lr": state.optimizer.param_groups[0]["lr"],
    }


def warn_if_degenerate(config: CptConfig) -> None:
    if not (config.mlm_on or config.mae_on):
        warnings.warn("both MLM and MAE are disabled; continual pre-training is a no-op", stacklevel=2)
