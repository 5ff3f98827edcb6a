"""Per-token modality labels and the masking operators built on them.

A sequence mixes visual rows (label 0) and language rows (label 1). The
separation operator keeps one modality's rows and zeroes the rest; the masked
accumulator adds a delta only at one modality's rows and copies the other
rows through untouched, bit for bit. Together they partition any feature
matrix exactly: select(F, 0) + select(F, 1) == F with no rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySequenceError, ShapeError
from .tensor import Tensor, record_op

VISUAL = 0
LANGUAGE = 1


class ModalityMask:
    """Immutable per-token visual/language labels."""

    __slots__ = ("labels", "n_visual", "n_language")

    def __init__(self, labels):
        lab = np.asarray(labels, dtype=np.int64)
        if lab.ndim != 1 or lab.size == 0:
            raise ShapeError(f"mask labels must be a non-empty vector, got shape {lab.shape}")
        if not np.isin(lab, (VISUAL, LANGUAGE)).all():
            raise ShapeError("mask labels must be 0 (visual) or 1 (language)")
        lab.flags.writeable = False
        self.labels = lab
        self.n_visual = int((lab == VISUAL).sum())
        self.n_language = int((lab == LANGUAGE).sum())

    def __len__(self) -> int:
        return self.labels.size

    def __eq__(self, other):
        return isinstance(other, ModalityMask) and np.array_equal(self.labels, other.labels)

    def selector(self, modality: int) -> np.ndarray:
        """Boolean vector marking positions of the given modality."""
        if modality not in (VISUAL, LANGUAGE):
            raise ValueError(f"modality must be 0 or 1, got {modality}")
        return self.labels == modality

    def extended(self, extra_labels) -> "ModalityMask":
        """New mask with labels appended (used while decoding)."""
        return ModalityMask(np.concatenate([self.labels, np.asarray(extra_labels, dtype=np.int64)]))

    def __repr__(self):
        return f"ModalityMask(n_visual={self.n_visual}, n_language={self.n_language})"


def build_mask(n_visual: int, n_language: int) -> ModalityMask:
    """Visual-prefix layout: n_visual leading 0-labels, then n_language 1-labels."""
    if n_visual < 0 or n_language < 0:
        raise ValueError(f"token counts must be nonnegative, got ({n_visual}, {n_language})")
    if n_visual + n_language == 0:
        raise EmptySequenceError("a sequence needs at least one token")
    return ModalityMask(np.concatenate([np.zeros(n_visual, dtype=np.int64), np.ones(n_language, dtype=np.int64)]))


def _check_rows(op: str, t: Tensor, mask: ModalityMask) -> None:
    if t.data.ndim != 2 or t.shape[0] != len(mask):
        raise ShapeError(f"{op}: tensor shape {t.shape} does not match mask length {len(mask)}")


def theta(features: Tensor, mask: ModalityMask, modality: int) -> Tensor:
    """Keep rows of the requested modality, zero the rest (same shape out)."""
    _check_rows("theta", features, mask)
    sel = mask.selector(modality)[:, None]
    need = features.requires_grad

    def grad_fn(g):
        return (np.where(sel, g, 0.0) if need else None,)

    return record_op(np.where(sel, features.data, 0.0), (features,), grad_fn)


def split(features: Tensor, mask: ModalityMask) -> tuple[Tensor, Tensor]:
    """(visual rows, language rows) as two full-shape tensors summing to the input."""
    return theta(features, mask, VISUAL), theta(features, mask, LANGUAGE)


def masked_add(base: Tensor, delta: Tensor, mask: ModalityMask, modality: int) -> Tensor:
    """base + delta at rows of the modality; other rows are copied verbatim."""
    _check_rows("masked_add", base, mask)
    if base.shape != delta.shape:
        raise ShapeError(f"masked_add needs matching shapes, got {base.shape} and {delta.shape}")
    sel = mask.selector(modality)[:, None]
    nb, nd = base.requires_grad, delta.requires_grad

    def grad_fn(g):
        return (g if nb else None, np.where(sel, g, 0.0) if nd else None)

    return record_op(np.where(sel, base.data + delta.data, base.data), (base, delta), grad_fn)


@dataclass(frozen=True)
class MultimodalSequence:
    """One assembled sequence: visual token span, language ids, masks.

    `loss_mask` marks supervised positions (answers); it may be true only at
    language positions.
    """

    visual_span: range
    language_token_ids: np.ndarray
    mask: ModalityMask
    loss_mask: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.language_token_ids, dtype=np.int64)
        lm = np.asarray(self.loss_mask, dtype=bool)
        object.__setattr__(self, "language_token_ids", ids)
        object.__setattr__(self, "loss_mask", lm)
        if len(self.visual_span) != self.mask.n_visual:
            raise ShapeError(
                f"visual span has {len(self.visual_span)} positions but mask counts {self.mask.n_visual}"
            )
        if ids.size != self.mask.n_language:
            raise ShapeError(f"{ids.size} language ids but mask counts {self.mask.n_language}")
        if lm.shape != (len(self.mask),):
            raise ShapeError(f"loss mask length {lm.shape} does not match sequence length {len(self.mask)}")
        if np.any(lm & (self.mask.labels == VISUAL)):
            raise ShapeError("loss mask may be true only at language positions")

    def __len__(self) -> int:
        return len(self.mask)
