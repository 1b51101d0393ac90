"""Interleaved text/image sequences, their JSON form, and padded batches.

A sequence is stored column-wise: ``token_ids`` holds the text id at text
positions (PAD at image positions), ``patches`` holds the patch vector at
image positions (zeros at text positions) and ``image_index`` tags each
position with the index of the image it belongs to (-1 for text).

JSON form::

    {"text": [ids...],
     "images": [[[patch], [patch], ...], ...],
     "layout": [["text", 3], ["image", 0], ["text", 2]]}

``layout`` lists segments in order; a text segment consumes the next ``n``
ids of ``text`` and an image segment inserts all patches of ``images[k]``.
Without ``layout`` the images come first (in order) followed by the text.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from .errors import InputError

PAD = 0
MASK = 1
EOS = 2
SEP = 3
SPECIAL_IDS = frozenset({PAD, MASK, EOS, SEP})
N_SPECIAL = 4


@dataclass(eq=False)
class InterleavedSequence:
    token_ids: np.ndarray  # (T,) int64
    patches: np.ndarray  # (T, D_patch) float64
    image_index: np.ndarray  # (T,) int64, -1 for text
    id: str | None = None

    def __post_init__(self) -> None:
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.patches = np.asarray(self.patches, dtype=np.float64)
        self.image_index = np.asarray(self.image_index, dtype=np.int64)
        T = self.token_ids.shape[0]
        if T < 1:
            raise InputError("sequence must have at least one element")
        if self.patches.ndim != 2 or self.patches.shape[0] != T or self.image_index.shape != (T,):
            raise InputError(
                f"inconsistent column shapes: ids {self.token_ids.shape}, "
                f"patches {self.patches.shape}, image_index {self.image_index.shape}"
            )

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def d_patch(self) -> int:
        return int(self.patches.shape[1])

    @property
    def is_image(self) -> np.ndarray:
        return self.image_index >= 0

    @property
    def text_positions(self) -> np.ndarray:
        return np.flatnonzero(self.image_index < 0)

    @property
    def image_positions(self) -> np.ndarray:
        return np.flatnonzero(self.image_index >= 0)

    @property
    def n_images(self) -> int:
        return int(self.image_index.max()) + 1 if self.is_image.any() else 0

    def image_spans(self) -> list[np.ndarray]:
        """Positions of each image, in image-index order."""
        return [np.flatnonzero(self.image_index == k) for k in range(self.n_images)]

    @classmethod
    def from_segments(cls, segments: Iterable[tuple[str, Any]], d_patch: int, id: str | None = None):
        """Build from ``[("text", ids), ("image", (P, d_patch) array), ...]``."""
        ids: list[int] = []
        patches: list[np.ndarray] = []
        img_idx: list[int] = []
        n_img = 0
        for kind, value in segments:
            if kind == "text":
                value = [int(t) for t in value]
                ids.extend(value)
                patches.append(np.zeros((len(value), d_patch)))
                img_idx.extend([-1] * len(value))
            elif kind == "image":
                arr = np.asarray(value, dtype=np.float64)
                if arr.ndim != 2 or arr.shape[1] != d_patch:
                    raise InputError(f"image patches must have shape (P, {d_patch}), got {arr.shape}")
                if arr.shape[0] == 0:
                    raise InputError("image with no patches")
                ids.extend([PAD] * arr.shape[0])
                patches.append(arr)
                img_idx.extend([n_img] * arr.shape[0])
                n_img += 1
            else:
                raise InputError(f"unknown segment kind {kind!r}")
        if not ids:
            raise InputError("sequence must have at least one element")
        return cls(np.array(ids), np.concatenate(patches, axis=0), np.array(img_idx), id=id)

    @classmethod
    def text(cls, ids: Sequence[int], d_patch: int, id: str | None = None):
        return cls.from_segments([("text", ids)], d_patch, id=id)

    def segments(self) -> list[tuple[str, Any]]:
        out: list[tuple[str, Any]] = []
        T = len(self)
        i = 0
        while i < T:
            k = self.image_index[i]
            j = i
            while j < T and self.image_index[j] == k:
                j += 1
            if k < 0:
                out.append(("text", self.token_ids[i:j].tolist()))
            else:
                out.append(("image", self.patches[i:j]))
            i = j
        return out

    def validate(self, vocab_size: int, d_patch: int) -> None:
        """Check the sequence invariants; raises InputError."""
        if self.d_patch != d_patch:
            raise InputError(f"patch dimension {self.d_patch} does not match expected {d_patch}")
        text = self.token_ids[self.image_index < 0]
        if text.size and (text.min() < 0 or text.max() >= vocab_size):
            bad = int(text[(text < 0) | (text >= vocab_size)][0])
            raise InputError(f"token id {bad} outside [0, {vocab_size})")
        if np.any(text == PAD):
            raise InputError("PAD id inside the logical sequence")
        for k, span in enumerate(self.image_spans()):
            if span.size == 0 or span[-1] - span[0] + 1 != span.size:
                raise InputError(f"image {k} does not occupy a contiguous span")

    def with_eos(self) -> "InterleavedSequence":
        if self.image_index[-1] < 0 and self.token_ids[-1] == EOS:
            return self
        return InterleavedSequence(
            np.append(self.token_ids, EOS),
            np.vstack([self.patches, np.zeros((1, self.d_patch))]),
            np.append(self.image_index, -1),
            id=self.id,
        )

    def concat(self, other: "InterleavedSequence", sep: int | None = None) -> "InterleavedSequence":
        segs = self.segments()
        if sep is not None:
            segs.append(("text", [sep]))
        segs.extend(other.segments())
        return InterleavedSequence.from_segments(segs, self.d_patch, id=self.id)

    def copy(self) -> "InterleavedSequence":
        return InterleavedSequence(
            self.token_ids.copy(), self.patches.copy(), self.image_index.copy(), id=self.id
        )

    def to_json(self) -> dict:
        text: list[int] = []
        images: list[list[list[float]]] = []
        layout: list[list] = []
        for kind, value in self.segments():
            if kind == "text":
                text.extend(value)
                layout.append(["text", len(value)])
            else:
                layout.append(["image", len(images)])
                images.append(value.tolist())
        return {"text": text, "images": images, "layout": layout}

    @classmethod
    def from_json(cls, obj: dict, d_patch: int, id: str | None = None) -> "InterleavedSequence":
        if not isinstance(obj, dict):
            raise InputError("sequence must be a JSON object")
        text = list(obj.get("text", []))
        images = list(obj.get("images", []))
        layout = obj.get("layout")
        if layout is None:
            layout = [["image", k] for k in range(len(images))]
            if text:
                layout.append(["text", len(text)])
        segments: list[tuple[str, Any]] = []
        cursor = 0
        used = set()
        for entry in layout:
            kind, n = entry[0], int(entry[1])
            if kind == "text":
                if cursor + n > len(text):
                    raise InputError("layout consumes more text ids than present")
                segments.append(("text", text[cursor : cursor + n]))
                cursor += n
            elif kind == "image":
                if not 0 <= n < len(images) or n in used:
                    raise InputError(f"layout references invalid image {n}")
                used.add(n)
                segments.append(("image", images[n]))
            else:
                raise InputError(f"unknown layout kind {kind!r}")
        if cursor != len(text) or len(used) != len(images):
            raise InputError("layout does not consume every text id and image")
        return cls.from_segments(segments, d_patch, id=id)


@dataclass
class SequenceBatch:
    """Right-padded tensor form of a list of sequences."""

    token_ids: torch.Tensor  # (B, T) long
    patches: torch.Tensor  # (B, T, D_patch)
    is_image: torch.Tensor  # (B, T) bool
    attention_mask: torch.Tensor  # (B, T) bool, True at real positions
    lengths: torch.Tensor  # (B,) long

    @classmethod
    def collate(
        cls,
        seqs: Sequence[InterleavedSequence],
        dtype: torch.dtype = torch.float32,
        pad_to: int | None = None,
    ) -> "SequenceBatch":
        if not seqs:
            raise InputError("cannot collate an empty list of sequences")
        d_patch = seqs[0].d_patch
        B = len(seqs)
        T = max(len(s) for s in seqs)
        if pad_to is not None:
            T = max(T, pad_to)
        ids = np.full((B, T), PAD, dtype=np.int64)
        patches = np.zeros((B, T, d_patch))
        is_image = np.zeros((B, T), dtype=bool)
        real = np.zeros((B, T), dtype=bool)
        for b, s in enumerate(seqs):
            if s.d_patch != d_patch:
                raise InputError("sequences in one batch must share the patch dimension")
            n = len(s)
            ids[b, :n] = s.token_ids
            patches[b, :n] = s.patches
            is_image[b, :n] = s.is_image
            real[b, :n] = True
        return cls(
            token_ids=torch.from_numpy(ids),
            patches=torch.from_numpy(patches).to(dtype),
            is_image=torch.from_numpy(is_image),
            attention_mask=torch.from_numpy(real),
            lengths=torch.tensor([len(s) for s in seqs], dtype=torch.long),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.token_ids.shape)  # type: ignore[return-value]
