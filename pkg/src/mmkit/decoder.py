"""Causal decoder with adapter-injected projections and attention capture.

The base network (embeddings, layer norms, every projection's main weight)
is seeded, frozen, and shared by all adapter variants. Each of the six
linear projections per block (q, k, v, o, ffn up, ffn down) carries exactly
one adapter layer: modality-routed, plain, or none. Visual tokens enter as
ready-made embeddings ahead of the text; language tokens go through the
frozen embedding table, which is also the tied output head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .lora import FrozenProjection, MMLoRAConfig, create_mmlora, create_plain_lora
from .nn import LayerNorm, WEIGHT_INIT_STD, multi_head_attention
from .routing import LANGUAGE, VISUAL, ModalityMask
from .tensor import (
    Tensor,
    add,
    concat_rows,
    content_hash,
    embedding_rows,
    gaussian,
    gelu,
    matmul,
    no_grad,
    scale,
    slice_rows,
    transpose,
)

PROJECTION_NAMES = ("q", "k", "v", "o", "up", "down")


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int
    n_heads: int
    hidden: int
    ffn_width: int
    vocab: int
    max_seq: int

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "hidden", "ffn_width", "vocab", "max_seq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"decoder {name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.n_heads != 0:
            raise ConfigError(f"hidden width {self.hidden} not divisible by {self.n_heads} heads")


class AttentionRecord:
    """Post-softmax attention weights: one (T, T) matrix per layer per head."""

    def __init__(self, per_layer_heads: list[list[np.ndarray]]):
        self.per_layer_heads = per_layer_heads

    @property
    def n_layers(self) -> int:
        return len(self.per_layer_heads)

    @property
    def seq_len(self) -> int:
        return self.per_layer_heads[0][0].shape[0]

    def layer_mean(self, layer: int) -> np.ndarray:
        """Head-averaged weights for one layer (rows still sum to 1)."""
        return np.mean(self.per_layer_heads[layer], axis=0)


class DecoderBlock:
    def __init__(self, ln1: LayerNorm, ln2: LayerNorm, projections: dict, n_heads: int):
        missing = [n for n in PROJECTION_NAMES if n not in projections]
        if missing:
            raise ConfigError(f"decoder block missing projections: {missing}")
        self.ln1 = ln1
        self.ln2 = ln2
        self.proj = projections
        self.n_heads = n_heads

    def forward(self, x, mask, capture=None, adapters_enabled=True):
        h = self.ln1(x)
        q = self.proj["q"].forward(h, mask, adapters_enabled)
        k = self.proj["k"].forward(h, mask, adapters_enabled)
        v = self.proj["v"].forward(h, mask, adapters_enabled)
        mixed = multi_head_attention(q, k, v, self.n_heads, causal=True, capture=capture)
        x = add(x, self.proj["o"].forward(mixed, mask, adapters_enabled))
        h2 = self.ln2(x)
        inner = gelu(self.proj["up"].forward(h2, mask, adapters_enabled))
        return add(x, self.proj["down"].forward(inner, mask, adapters_enabled))

    def adapter_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name in PROJECTION_NAMES:
            out.update(self.proj[name].named_parameters(f"{prefix}{name}."))
        return out

    def base_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.ln1.named_parameters(f"{prefix}ln1.")
        out.update(self.ln2.named_parameters(f"{prefix}ln2."))
        for name in PROJECTION_NAMES:
            out.update(self.proj[name].named_frozen(f"{prefix}{name}."))
        return out


class MMDecoder:
    """Frozen-base causal decoder; only its adapter layers ever train.

    The output head is the transposed token embedding times a fixed rescale
    of 1 / (init_std * sqrt(hidden)). The final layer norm pins hidden rows
    to norm sqrt(hidden) and the embedding rows sit near init_std *
    sqrt(hidden), so without the rescale the logits of a freshly seeded base
    are capped near 1 and cross-entropy cannot fall meaningfully; the
    rescale restores unit-scale logits while keeping the head tied.
    """

    def __init__(self, config: DecoderConfig, tok_embed, pos_embed, blocks, ln_f, lora_mode: str):
        self.config = config
        self.tok_embed = tok_embed
        self.pos_embed = pos_embed
        self.blocks = blocks
        self.ln_f = ln_f
        self.lora_mode = lora_mode
        self.head_scale = 1.0 / (WEIGHT_INIT_STD * config.hidden**0.5)

    def forward(
        self,
        visual_feats: Tensor | None,
        language_ids,
        mask: ModalityMask,
        capture_attention: bool = False,
        adapters_enabled: bool = True,
    ) -> tuple[Tensor, AttentionRecord | None]:
        """Logits over the vocabulary at every position.

        `visual_feats` rows occupy the leading positions and bypass the token
        embedding; `language_ids` embed normally behind them.
        """
        ids = np.asarray(language_ids, dtype=np.intp)
        n_vis = 0 if visual_feats is None else visual_feats.shape[0]
        total = n_vis + ids.size
        if total > self.config.max_seq:
            raise ShapeError(f"sequence length {total} exceeds context {self.config.max_seq}")
        if len(mask) != total or mask.n_visual != n_vis:
            raise ShapeError(
                f"mask ({mask.n_visual} visual / {mask.n_language} language) does not match "
                f"{n_vis} visual rows + {ids.size} ids"
            )
        if n_vis and (mask.labels[:n_vis] != VISUAL).any():
            raise ShapeError("visual features must occupy the leading mask positions")

        lang = embedding_rows(self.tok_embed, ids) if ids.size else None
        if visual_feats is not None and lang is not None:
            x = concat_rows((visual_feats, lang))
        else:
            x = visual_feats if visual_feats is not None else lang
        x = add(x, slice_rows(self.pos_embed, 0, total))

        record = [] if capture_attention else None
        for block in self.blocks:
            layer_capture = [] if capture_attention else None
            x = block.forward(x, mask, capture=layer_capture, adapters_enabled=adapters_enabled)
            if capture_attention:
                record.append(layer_capture)
        logits = scale(matmul(self.ln_f(x), transpose(self.tok_embed)), self.head_scale)
        return logits, (AttentionRecord(record) if capture_attention else None)

    def adapter_parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        params = {}
        for i, block in enumerate(self.blocks):
            params.update(block.adapter_parameters(f"block{i}."))
        return {"mm_lora": params} if params else {}

    def base_parameters(self) -> dict[str, Tensor]:
        out = {"tok_embed": self.tok_embed, "pos_embed": self.pos_embed}
        for i, block in enumerate(self.blocks):
            out.update(block.base_parameters(f"block{i}."))
        out.update(self.ln_f.named_parameters("ln_f."))
        return out

    def frozen_hash(self) -> str:
        return content_hash(self.base_parameters())

    def param_counts(self) -> tuple[int, int]:
        trainable = sum(t.size for g in self.adapter_parameter_groups().values() for t in g.values())
        frozen = sum(t.size for t in self.base_parameters().values())
        return trainable, frozen


def inject_mmlora(
    config: DecoderConfig,
    lora_config: MMLoRAConfig | None,
    seed,
    lora_mode: str = "mm",
) -> MMDecoder:
    """Seeded frozen base with one fresh adapter layer per linear projection.

    `lora_mode` selects routed adapters ("mm"), the unrouted baseline
    ("plain", rank R), or bare frozen projections ("none").
    """
    if lora_mode not in ("mm", "plain", "none"):
        raise ConfigError(f"unknown adapter mode {lora_mode!r}")
    if lora_mode != "none" and lora_config is None:
        raise ConfigError(f"adapter mode {lora_mode!r} needs a rank configuration")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    base_ss, adapter_ss = ss.spawn(2)
    base_rng = np.random.default_rng(base_ss)
    adapter_rng = np.random.default_rng(adapter_ss)
    c, f = config.hidden, config.ffn_width
    # Base weights draw from their own stream so every adapter mode and rank
    # split sits on a bit-identical frozen network for the same seed.
    tok_embed = gaussian((config.vocab, c), WEIGHT_INIT_STD, base_rng)
    pos_embed = gaussian((config.max_seq, c), WEIGHT_INIT_STD, base_rng)
    proj_dims = {"q": (c, c), "k": (c, c), "v": (c, c), "o": (c, c), "up": (c, f), "down": (f, c)}
    base_weights = [
        {name: gaussian(proj_dims[name], WEIGHT_INIT_STD, base_rng) for name in PROJECTION_NAMES}
        for _ in range(config.n_layers)
    ]

    blocks = []
    for layer_weights in base_weights:
        projections = {}
        for name in PROJECTION_NAMES:
            w_o = layer_weights[name]
            if lora_mode == "mm":
                projections[name] = create_mmlora(w_o, lora_config, adapter_rng)
            elif lora_mode == "plain":
                projections[name] = create_plain_lora(w_o, lora_config.rank_total, adapter_rng)
            else:
                projections[name] = FrozenProjection(w_o)
        blocks.append(
            DecoderBlock(
                LayerNorm.create(c, trainable=False),
                LayerNorm.create(c, trainable=False),
                projections,
                config.n_heads,
            )
        )
    return MMDecoder(config, tok_embed, pos_embed, blocks, LayerNorm.create(c, trainable=False), lora_mode)


def generate_greedy(
    decoder: MMDecoder,
    visual_feats: Tensor | None,
    language_ids,
    mask: ModalityMask,
    max_new: int,
    adapters_enabled: bool = True,
) -> np.ndarray:
    """Deterministic argmax continuation; ties resolve to the lowest token id.

    Generated positions are labeled as language tokens.
    """
    ids = np.asarray(language_ids, dtype=np.intp)
    n_vis = 0 if visual_feats is None else visual_feats.shape[0]
    if n_vis + ids.size + max_new > decoder.config.max_seq:
        raise ShapeError(
            f"prompt of {n_vis + ids.size} plus {max_new} new tokens exceeds context "
            f"{decoder.config.max_seq}"
        )
    out = []
    cur_mask = mask
    with no_grad():
        for _ in range(max_new):
            logits, _ = decoder.forward(visual_feats, ids, cur_mask, adapters_enabled=adapters_enabled)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            ids = np.concatenate([ids, [nxt]])
            cur_mask = cur_mask.extended([LANGUAGE])
    return np.asarray(out, dtype=np.intp)


def attention_mass(record: AttentionRecord, mask: ModalityMask) -> list[tuple[float, float]]:
    """Per layer: how language rows split their attention between visual and
    language columns, averaged over heads and rows. Each pair sums to 1."""
    if record.seq_len != len(mask):
        raise ShapeError(f"record covers {record.seq_len} positions, mask {len(mask)}")
    lang_rows = mask.selector(LANGUAGE)
    if not lang_rows.any():
        raise ShapeError("attention mass needs at least one language row")
    vis_cols = mask.selector(VISUAL)
    masses = []
    for layer_heads in record.per_layer_heads:
        stacked = np.stack(layer_heads)[:, lang_rows, :]  # heads x lang rows x T
        vis = float(stacked[:, :, vis_cols].sum(axis=2).mean())
        lang = float(stacked[:, :, ~vis_cols].sum(axis=2).mean())
        masses.append((vis, lang))
    return masses
