"""Dense building blocks shared by the visual tower and the decoder."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    add_bias,
    causal_shift,
    concat_cols,
    gaussian,
    gelu,
    layer_norm_rows,
    matmul,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
    zeros,
)

WEIGHT_INIT_STD = 0.02


class Linear:
    """y = x W (+ b). Bias only where a component declares one."""

    def __init__(self, w: Tensor, b: Tensor | None = None):
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")
        self.w = w
        self.b = b

    @classmethod
    def create(cls, d_in, d_out, rng, trainable, bias=False, std=WEIGHT_INIT_STD):
        w = gaussian((d_in, d_out), std, rng, requires_grad=trainable)
        b = zeros((d_out,), requires_grad=trainable) if bias else None
        return cls(w, b)

    def copy(self, trainable: bool) -> "Linear":
        w = Tensor(self.w.data.copy(), requires_grad=trainable)
        b = None if self.b is None else Tensor(self.b.data.copy(), requires_grad=trainable)
        return Linear(w, b)

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        return add_bias(out, self.b) if self.b is not None else out

    __call__ = forward

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}w": self.w}
        if self.b is not None:
            out[f"{prefix}b"] = self.b
        return out


class LayerNorm:
    """Per-row normalization with learnable gain and bias."""

    def __init__(self, gain: Tensor, bias: Tensor):
        self.gain = gain
        self.bias = bias

    @classmethod
    def create(cls, width, trainable):
        return cls(
            Tensor(np.ones(width), requires_grad=trainable),
            zeros((width,), requires_grad=trainable),
        )

    def copy(self, trainable: bool) -> "LayerNorm":
        return LayerNorm(
            Tensor(self.gain.data.copy(), requires_grad=trainable),
            Tensor(self.bias.data.copy(), requires_grad=trainable),
        )

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm_rows(x, self.gain, self.bias)

    __call__ = forward

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}gain": self.gain, f"{prefix}bias": self.bias}


def multi_head_attention(q, k, v, n_heads, causal=False, capture=None):
    """Scaled dot-product attention over already-projected q, k, v.

    Splits the width into heads by column slicing, runs each head, and
    concatenates. With `causal` set, positions attend only to themselves and
    earlier positions (scores above the diagonal are forced to exp-underflow,
    so the attained weights are exactly zero). `capture`, when given, is a
    list that receives each head's post-softmax (Tq, Tk) weight matrix.
    """
    width = q.shape[1]
    if width != k.shape[1] or width != v.shape[1] or width % n_heads != 0:
        raise ConfigError(f"head split needs equal widths divisible by {n_heads}, got {q.shape}/{k.shape}/{v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key and value row counts differ: {k.shape} vs {v.shape}")
    if causal and q.shape[0] != k.shape[0]:
        raise ShapeError("causal attention needs matching query/key lengths")
    d_head = width // n_heads
    inv_sqrt = 1.0 / math.sqrt(d_head)
    contexts = []
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
        if causal:
            scores = causal_shift(scores)
        attn = softmax_rows(scores)
        if capture is not None:
            capture.append(attn.data.copy())
        contexts.append(matmul(attn, vh))
    return concat_cols(contexts)


class AttentionStack:
    """Self- or cross-attention sublayer: pre-norm, projections, head mix."""

    def __init__(self, ln: LayerNorm, wq: Linear, wk: Linear, wv: Linear, wo: Linear, n_heads: int):
        self.ln = ln
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.n_heads = n_heads

    @classmethod
    def create(cls, width, n_heads, rng, trainable):
        if width % n_heads != 0:
            raise ConfigError(f"width {width} not divisible by {n_heads} heads")
        make = lambda: Linear.create(width, width, rng, trainable)
        return cls(LayerNorm.create(width, trainable), make(), make(), make(), make(), n_heads)

    def copy(self, trainable: bool) -> "AttentionStack":
        return AttentionStack(
            self.ln.copy(trainable),
            self.wq.copy(trainable), self.wk.copy(trainable),
            self.wv.copy(trainable), self.wo.copy(trainable),
            self.n_heads,
        )

    def forward(self, x: Tensor, kv_source: Tensor | None = None) -> Tensor:
        """Residual attention step; keys/values come from `kv_source` when
        cross-attending, else from the normalized input itself."""
        h = self.ln(x)
        kv = h if kv_source is None else kv_source
        mixed = multi_head_attention(self.wq(h), self.wk(kv), self.wv(kv), self.n_heads)
        return add(x, self.wo(mixed))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        out.update(self.ln.named_parameters(f"{prefix}ln."))
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.named_parameters(f"{prefix}{tag}."))
        return out


class FeedForward:
    """Pre-norm residual MLP sublayer with a GELU between the projections."""

    def __init__(self, ln: LayerNorm, up: Linear, down: Linear):
        self.ln = ln
        self.up = up
        self.down = down

    @classmethod
    def create(cls, width, hidden, rng, trainable):
        return cls(
            LayerNorm.create(width, trainable),
            Linear.create(width, hidden, rng, trainable),
            Linear.create(hidden, width, rng, trainable),
        )

    def copy(self, trainable: bool) -> "FeedForward":
        return FeedForward(self.ln.copy(trainable), self.up.copy(trainable), self.down.copy(trainable))

    def forward(self, x: Tensor) -> Tensor:
        return add(x, self.down(gelu(self.up(self.ln(x)))))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        out.update(self.ln.named_parameters(f"{prefix}ln."))
        out.update(self.up.named_parameters(f"{prefix}up."))
        out.update(self.down.named_parameters(f"{prefix}down."))
        return out
