"""Modality-routed low-rank adapters with a parity-preserving rank budget.

One layer wraps a frozen projection W_o with two independent adapter pairs:
a visual pair of rank beta*R and a language pair of rank gamma*R. Input rows
are routed by the sequence's modality mask, each pair sees only its own rows,
and the deltas are added back only at those rows. Because beta + gamma = 1,
the trainable parameter count equals a single rank-R adapter on the same
projection, for every admissible split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import routing
from .errors import ConfigError, ShapeError
from .tensor import Tensor, gaussian, matmul, scale, zeros

ADAPTER_INIT_STD = 0.02
_INTEGRALITY_TOL = 1e-9


@dataclass(frozen=True)
class MMLoRAConfig:
    """Total rank plus the visual/language budget split.

    `alpha_scale` is the LoRA scaling numerator; None means each side scales
    by its own effective rank, i.e. the delta enters with unit weight.
    """

    rank_total: int
    beta: float
    gamma: float
    alpha_scale: float | None = None

    def __post_init__(self):
        if self.rank_total <= 0:
            raise ConfigError(f"total rank must be positive, got {self.rank_total}")
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.gamma <= 1.0):
            raise ConfigError(f"beta and gamma must lie in [0, 1], got ({self.beta}, {self.gamma})")
        if abs(self.beta + self.gamma - 1.0) > _INTEGRALITY_TOL:
            raise ConfigError(f"beta + gamma must equal 1, got {self.beta} + {self.gamma}")
        for name, frac in (("beta", self.beta), ("gamma", self.gamma)):
            r = frac * self.rank_total
            if abs(r - round(r)) > _INTEGRALITY_TOL:
                raise ConfigError(
                    f"{name} * rank must be an integer, got {frac} * {self.rank_total} = {r}"
                )

    @property
    def rank_visual(self) -> int:
        return int(round(self.beta * self.rank_total))

    @property
    def rank_language(self) -> int:
        return self.rank_total - self.rank_visual

    def side_scale(self, rank: int) -> float:
        if rank == 0:
            return 0.0
        return 1.0 if self.alpha_scale is None else self.alpha_scale / rank


class MMLoRALayer:
    """Frozen projection plus routed visual/language low-rank deltas.

    A rank-0 side is represented by a missing pair (None matrices) and
    contributes nothing, not a degenerate zero-width matmul.
    """

    def __init__(self, w_o, a_vis, b_vis, a_lang, b_lang, scale_vis=1.0, scale_lang=1.0):
        self.w_o = w_o
        self.a_vis, self.b_vis = a_vis, b_vis
        self.a_lang, self.b_lang = a_lang, b_lang
        self.scale_vis = float(scale_vis)
        self.scale_lang = float(scale_lang)
        if w_o.requires_grad:
            raise ConfigError("the base projection of an adapter layer must be frozen")
        for a, b, tag in ((a_vis, b_vis, "visual"), (a_lang, b_lang, "language")):
            if (a is None) != (b is None):
                raise ConfigError(f"{tag} adapter pair must be both present or both absent")
            if a is not None and (a.shape[0] != w_o.shape[0] or b.shape[1] != w_o.shape[1] or a.shape[1] != b.shape[0]):
                raise ShapeError(
                    f"{tag} pair shapes {a.shape}, {b.shape} do not fit projection {w_o.shape}"
                )

    def _delta(self, x, mask, modality, a, b, side_scale):
        routed = routing.theta(x, mask, modality)
        d = matmul(matmul(routed, a), b)
        if side_scale != 1.0:
            d = scale(d, side_scale)
        return d

    def forward(self, x: Tensor, mask: routing.ModalityMask, adapters_enabled: bool = True) -> Tensor:
        out = matmul(x, self.w_o)
        if not adapters_enabled:
            return out
        if self.a_vis is not None:
            dv = self._delta(x, mask, routing.VISUAL, self.a_vis, self.b_vis, self.scale_vis)
            out = routing.masked_add(out, dv, mask, routing.VISUAL)
        if self.a_lang is not None:
            dl = self._delta(x, mask, routing.LANGUAGE, self.a_lang, self.b_lang, self.scale_lang)
            out = routing.masked_add(out, dl, mask, routing.LANGUAGE)
        return out

    def param_count(self) -> tuple[int, int]:
        """(trainable, frozen) parameter counts."""
        trainable = 0
        for t in (self.a_vis, self.b_vis, self.a_lang, self.b_lang):
            if t is not None:
                trainable += t.size
        return trainable, self.w_o.size

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for tag, t in (("a_vis", self.a_vis), ("b_vis", self.b_vis), ("a_lang", self.a_lang), ("b_lang", self.b_lang)):
            if t is not None:
                out[f"{prefix}{tag}"] = t
        return out

    def named_frozen(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_o": self.w_o}


def create_mmlora(w_o: Tensor, config: MMLoRAConfig, rng) -> MMLoRALayer:
    """Seeded layer: A matrices Gaussian(std 0.02), B matrices zero.

    Zero B makes the layer equal the frozen projection exactly at init.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c_in, c_out = w_o.shape
    r_v, r_t = config.rank_visual, config.rank_language

    def pair(r):
        if r == 0:
            return None, None
        return gaussian((c_in, r), ADAPTER_INIT_STD, rng, requires_grad=True), zeros((r, c_out), requires_grad=True)

    a_vis, b_vis = pair(r_v)
    a_lang, b_lang = pair(r_t)
    return MMLoRALayer(
        w_o, a_vis, b_vis, a_lang, b_lang,
        scale_vis=config.side_scale(r_v), scale_lang=config.side_scale(r_t),
    )


def plain_lora_forward(w_o: Tensor, w_a: Tensor, w_b: Tensor, features: Tensor, delta_scale: float = 1.0) -> Tensor:
    """Standard LoRA: every row gets the same low-rank delta, mask ignored."""
    if w_a.shape[0] != w_o.shape[0] or w_b.shape[1] != w_o.shape[1] or w_a.shape[1] != w_b.shape[0]:
        raise ShapeError(f"adapter shapes {w_a.shape}, {w_b.shape} do not fit projection {w_o.shape}")
    delta = matmul(matmul(features, w_a), w_b)
    if delta_scale != 1.0:
        delta = scale(delta, delta_scale)
    return matmul(features, w_o) + delta


class PlainLoRALayer:
    """Unrouted rank-R adapter; the baseline the routed layer is compared to."""

    def __init__(self, w_o, w_a, w_b, delta_scale=1.0):
        if w_o.requires_grad:
            raise ConfigError("the base projection of an adapter layer must be frozen")
        self.w_o = w_o
        self.w_a, self.w_b = w_a, w_b
        self.delta_scale = float(delta_scale)

    def forward(self, x, mask=None, adapters_enabled: bool = True) -> Tensor:
        if not adapters_enabled:
            return matmul(x, self.w_o)
        return plain_lora_forward(self.w_o, self.w_a, self.w_b, x, self.delta_scale)

    def param_count(self) -> tuple[int, int]:
        return self.w_a.size + self.w_b.size, self.w_o.size

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_a": self.w_a, f"{prefix}w_b": self.w_b}

    def named_frozen(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_o": self.w_o}


def create_plain_lora(w_o: Tensor, rank: int, rng, alpha_scale: float | None = None) -> PlainLoRALayer:
    """Seeded baseline layer; matches the routed init draw order so a gamma=1
    language pair and a plain pair built from the same seed coincide."""
    if rank <= 0:
        raise ConfigError(f"rank must be positive, got {rank}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c_in, c_out = w_o.shape
    w_a = gaussian((c_in, rank), ADAPTER_INIT_STD, rng, requires_grad=True)
    w_b = zeros((rank, c_out), requires_grad=True)
    delta_scale = 1.0 if alpha_scale is None else alpha_scale / rank
    return PlainLoRALayer(w_o, w_a, w_b, delta_scale)


class FrozenProjection:
    """Bare frozen linear map with the adapter-layer interface (no deltas)."""

    def __init__(self, w_o):
        if w_o.requires_grad:
            raise ConfigError("a frozen projection cannot track gradients")
        self.w_o = w_o

    def forward(self, x, mask=None, adapters_enabled: bool = True) -> Tensor:
        return matmul(x, self.w_o)

    def param_count(self) -> tuple[int, int]:
        return 0, self.w_o.size

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {}

    def named_frozen(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_o": self.w_o}
