"""Small pre-norm transformer over interleaved token/patch sequences.

The same weights run in two attention modes: ``causal`` (position i sees
positions <= i) and ``bidirectional`` (every real position sees every real
position). Right-padding is always excluded from the keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import torch
import torch.nn as nn

from .errors import ConfigError, InputError, NumericError
from .sequence import N_SPECIAL, InterleavedSequence, SequenceBatch

ATTENTION_MODES = ("causal", "bidirectional")
DTYPES = {"float32": torch.float32, "float64": torch.float64}
INIT_STD = 0.02


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 128
    d_patch: int = 16
    max_len: int = 128
    attention_mode: str = "bidirectional"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        if self.vocab_size <= N_SPECIAL:
            raise ConfigError(f"vocab_size must exceed the {N_SPECIAL} reserved ids")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "d_patch", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module) -> None:
    """N(0, 0.02) for weight matrices and embeddings, zero biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=INIT_STD)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def attention_mask(key_mask: torch.Tensor, mode: str) -> torch.Tensor:
    """Boolean (B, 1, T, T) mask of allowed query->key pairs."""
    if mode not in ATTENTION_MODES:
        raise InputError(f"unknown attention mode {mode!r}")
    T = key_mask.shape[1]
    allowed = key_mask[:, None, None, :].expand(-1, 1, T, T)
    if mode == "causal":
        allowed = allowed & torch.ones(T, T, dtype=torch.bool, device=key_mask.device).tril()
    return allowed


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, h, D // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(D // h)
        scores = scores.masked_fill(~allowed, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.ff(self.ln2(x))


def _check_finite(x: torch.Tensor, layer: int, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values {where} (layer {layer})", layer=layer)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.patch_projection = nn.Linear(config.d_patch, d)
        self.position_embedding = nn.Parameter(torch.zeros(config.max_len, d))
        self.blocks = nn.ModuleList(
            Block(d, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(d)
        init_weights(self)
        nn.init.normal_(self.position_embedding, std=INIT_STD)
        self.to(config.torch_dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    def collate(self, seqs: list[InterleavedSequence]) -> SequenceBatch:
        for s in seqs:
            s.validate(self.config.vocab_size, self.config.d_patch)
        return SequenceBatch.collate(seqs, dtype=self.dtype)

    def embed_inputs(self, batch: SequenceBatch | InterleavedSequence) -> torch.Tensor:
        """Token embedding or patch projection per position, plus positional embedding."""
        single = isinstance(batch, InterleavedSequence)
        if single:
            batch = self.collate([batch])
        cfg = self.config
        B, T = batch.token_ids.shape
        if T > cfg.max_len:
            raise InputError(f"sequence length {T} exceeds max_len={cfg.max_len}")
        if batch.patches.shape[-1] != cfg.d_patch:
            raise InputError(f"patch dimension {batch.patches.shape[-1]} != {cfg.d_patch}")
        ids = batch.token_ids
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise InputError(f"token id outside [0, {cfg.vocab_size})")
        tok = self.token_embedding(ids)
        img = self.patch_projection(batch.patches.to(self.dtype))
        x = torch.where(batch.is_image[..., None], img, tok) + self.position_embedding[:T]
        return x[0] if single else x

    def forward(
        self, batch: SequenceBatch | InterleavedSequence, mode: str | None = None
    ) -> torch.Tensor:
        """Hidden states (B, T, d_model), or (T, d_model) for a single sequence."""
        mode = mode or self.config.attention_mode
        single = isinstance(batch, InterleavedSequence)
        if single:
            batch = self.collate([batch])
        allowed = attention_mask(batch.attention_mask, mode)
        x = self.embed_inputs(batch)
        _check_finite(x, 0, "in input embeddings")
        for i, block in enumerate(self.blocks):
            x = block(x, allowed)
            _check_finite(x, i + 1, "after transformer block")
        x = self.final_norm(x)
        return x[0] if single else x


def parameter_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: nn.Module | Iterable[tuple[str, nn.Parameter]],
) -> dict[str, torch.Tensor]:
    """Gradients of the scalar ``loss_fn()`` for every named parameter.

    Parameters the loss does not depend on get a zero gradient.
    """
    named = list(params.named_parameters() if isinstance(params, nn.Module) else params)
    loss = loss_fn()
    if loss.dim() != 0:
        raise InputError("loss_fn must return a scalar")
    tensors = [p for _, p in named]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        out[name] = g
    return out


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
