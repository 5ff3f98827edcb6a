"""Frozen patch tower, the query-ladder adapter, and the VL bridge.

The frozen encoder is a small pre-norm ViT over a grid of one-pixel patches;
it never trains and exposes the hidden state after every block. The ladder
adapter carries a handful of learnable query tokens through cross-attention
layers, each reading one designated intermediate of the frozen encoder, so
new visual features are learned without touching the pretrained weights. The
tower output is the two feature sets concatenated and pushed through a
two-layer MLP into the decoder width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import AttentionStack, FeedForward, Linear, WEIGHT_INIT_STD
from .tensor import Tensor, concat_rows, content_hash, gaussian, gelu


@dataclass(frozen=True)
class TowerConfig:
    grid: int
    channels: int
    width: int
    heads: int
    blocks: int
    ladder_layers: int
    n_query: int
    adapter_hidden: int
    out_width: int
    use_qladder: bool = True
    ffn_hidden: int | None = None  # None: 2x width

    def __post_init__(self):
        for name in ("grid", "channels", "width", "heads", "blocks", "adapter_hidden", "out_width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"tower {name} must be positive, got {getattr(self, name)}")
        if self.width % self.heads != 0:
            raise ConfigError(f"tower width {self.width} not divisible by {self.heads} heads")
        if self.use_qladder:
            if self.n_query <= 0 or self.ladder_layers <= 0:
                raise ConfigError("ladder needs positive n_query and ladder_layers")
            if self.n_query >= self.n_patches:
                raise ConfigError(
                    f"query count must stay well below the patch count, got {self.n_query} >= {self.n_patches}"
                )
            if self.ladder_layers > self.blocks:
                raise ConfigError(
                    f"ladder depth {self.ladder_layers} exceeds encoder depth {self.blocks}"
                )

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_visual_tokens(self) -> int:
        return self.n_patches + (self.n_query if self.use_qladder else 0)

    @property
    def ffn(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 2 * self.width


class EncoderBlock:
    """Pre-norm self-attention + FFN; frozen in the encoder."""

    def __init__(self, attn: AttentionStack, ffn: FeedForward):
        self.attn = attn
        self.ffn = ffn

    @classmethod
    def create(cls, cfg: TowerConfig, rng, trainable=False):
        return cls(
            AttentionStack.create(cfg.width, cfg.heads, rng, trainable),
            FeedForward.create(cfg.width, cfg.ffn, rng, trainable),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.ffn.forward(self.attn.forward(x))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.attn.named_parameters(f"{prefix}attn.")
        out.update(self.ffn.named_parameters(f"{prefix}ffn."))
        return out


class FrozenEncoder:
    """Deterministic, never-trained patch encoder exposing all hidden states."""

    def __init__(self, cfg: TowerConfig, patch_embed: Linear, blocks: list[EncoderBlock]):
        self.cfg = cfg
        self.patch_embed = patch_embed
        self.blocks = blocks

    @classmethod
    def create(cls, cfg: TowerConfig, rng):
        patch_embed = Linear.create(cfg.channels, cfg.width, rng, trainable=False)
        blocks = [EncoderBlock.create(cfg, rng, trainable=False) for _ in range(cfg.blocks)]
        return cls(cfg, patch_embed, blocks)

    def encode(self, image: Tensor) -> tuple[Tensor, list[Tensor]]:
        """(final features, per-block hidden states) for a (G, G, K) image."""
        g, k = self.cfg.grid, self.cfg.channels
        if image.shape != (g, g, k):
            raise ShapeError(f"expected image shape {(g, g, k)}, got {image.shape}")
        patches = Tensor(image.data.reshape(g * g, k))
        x = self.patch_embed(patches)
        intermediates = []
        for block in self.blocks:
            x = block.forward(x)
            intermediates.append(x)
        return intermediates[-1], intermediates

    def named_parameters(self, prefix: str = "encoder.") -> dict[str, Tensor]:
        out = self.patch_embed.named_parameters(f"{prefix}patch_embed.")
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}block{i}."))
        return out

    def weight_hash(self) -> str:
        return content_hash(self.named_parameters())


def ladder_source_indices(encoder_blocks: int, ladder_layers: int) -> list[int]:
    """Evenly spaced 0-based block indices, deepest block last."""
    return [math.ceil((j + 1) * encoder_blocks / ladder_layers) - 1 for j in range(ladder_layers)]


class LadderLayer:
    """Cross-attention (queries read one frozen intermediate) plus FFN."""

    def __init__(self, attn: AttentionStack, ffn: FeedForward, source_index: int):
        self.attn = attn
        self.ffn = ffn
        self.source_index = source_index

    def forward(self, queries: Tensor, intermediate: Tensor) -> Tensor:
        return self.ffn.forward(self.attn.forward(queries, kv_source=intermediate))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.attn.named_parameters(f"{prefix}attn.")
        out.update(self.ffn.named_parameters(f"{prefix}ffn."))
        return out


class QLadder:
    """Learnable query tokens refined layer by layer against encoder states."""

    def __init__(self, cfg: TowerConfig, queries: Tensor, layers: list[LadderLayer]):
        self.cfg = cfg
        self.queries = queries
        self.layers = layers

    @classmethod
    def create(cls, cfg: TowerConfig, encoder: FrozenEncoder, rng):
        """Ladder weights start as trainable copies of the encoder blocks they
        read (the key/value projections come from that block's self-attention),
        the closest stand-in for adapting pretrained encoder weights."""
        queries = gaussian((cfg.n_query, cfg.width), WEIGHT_INIT_STD, rng, requires_grad=True)
        layers = []
        for src in ladder_source_indices(cfg.blocks, cfg.ladder_layers):
            block = encoder.blocks[src]
            layers.append(LadderLayer(block.attn.copy(trainable=True), block.ffn.copy(trainable=True), src))
        return cls(cfg, queries, layers)

    def forward(self, intermediates: list[Tensor]) -> Tensor:
        if len(intermediates) != self.cfg.blocks:
            raise ConfigError(
                f"ladder expects {self.cfg.blocks} encoder intermediates, got {len(intermediates)}"
            )
        x = self.queries
        for layer in self.layers:
            x = layer.forward(x, intermediates[layer.source_index])
        return x

    def named_parameters(self, prefix: str = "qladder.") -> dict[str, Tensor]:
        out = {f"{prefix}queries": self.queries}
        for j, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}layer{j}."))
        return out


class VLAdapter:
    """Two-layer MLP bridging tower width to decoder width; always trainable."""

    def __init__(self, fc1: Linear, fc2: Linear):
        self.fc1 = fc1
        self.fc2 = fc2

    @classmethod
    def create(cls, cfg: TowerConfig, rng):
        return cls(
            Linear.create(cfg.width, cfg.adapter_hidden, rng, trainable=True, bias=True),
            Linear.create(cfg.adapter_hidden, cfg.out_width, rng, trainable=True, bias=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.fc1.w.shape[0]:
            raise ShapeError(f"adapter expects width {self.fc1.w.shape[0]}, got {x.shape}")
        return self.fc2(gelu(self.fc1(x)))

    def named_parameters(self, prefix: str = "adapter.") -> dict[str, Tensor]:
        out = self.fc1.named_parameters(f"{prefix}fc1.")
        out.update(self.fc2.named_parameters(f"{prefix}fc2."))
        return out


def fuse(f_c: Tensor, f_q: Tensor) -> Tensor:
    """Concatenate encoder features and query features, encoder rows first."""
    if f_c.shape[1] != f_q.shape[1]:
        raise ShapeError(f"feature widths differ: {f_c.shape} vs {f_q.shape}")
    return concat_rows((f_c, f_q))


class VisualTower:
    """Frozen encoder + optional ladder + adapter, image in, decoder tokens out."""

    def __init__(self, cfg: TowerConfig, encoder: FrozenEncoder, qladder: QLadder | None, adapter: VLAdapter):
        if cfg.use_qladder and qladder is None:
            raise ConfigError("configuration enables the ladder but none was provided")
        self.cfg = cfg
        self.encoder = encoder
        self.qladder = qladder
        self.adapter = adapter

    @classmethod
    def create(cls, cfg: TowerConfig, seed):
        """Seeded tower. The encoder, ladder, and adapter draw from separate
        child streams, so toggling the ladder or resizing the query set leaves
        the other components bit-identical."""
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        enc_ss, ladder_ss, adapter_ss = ss.spawn(3)
        encoder = FrozenEncoder.create(cfg, np.random.default_rng(enc_ss))
        qladder = QLadder.create(cfg, encoder, np.random.default_rng(ladder_ss)) if cfg.use_qladder else None
        adapter = VLAdapter.create(cfg, np.random.default_rng(adapter_ss))
        return cls(cfg, encoder, qladder, adapter)

    def n_visual_tokens(self, use_qladder: bool | None = None) -> int:
        on = self.cfg.use_qladder if use_qladder is None else use_qladder
        return self.cfg.n_patches + (self.cfg.n_query if on and self.qladder is not None else 0)

    def forward(self, image: Tensor, use_qladder: bool | None = None) -> Tensor:
        """Decoder-ready visual tokens for one image."""
        on = (self.cfg.use_qladder if use_qladder is None else use_qladder) and self.qladder is not None
        f_c, intermediates = self.encoder.encode(image)
        f_v = fuse(f_c, self.qladder.forward(intermediates)) if on else f_c
        return self.adapter.forward(f_v)

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        groups = {"adapter": self.adapter.named_parameters()}
        if self.qladder is not None:
            groups["qladder"] = self.qladder.named_parameters()
        return groups

    def named_frozen(self) -> dict[str, Tensor]:
        return self.encoder.named_parameters()

    def frozen_hash(self) -> str:
        return self.encoder.weight_hash()
