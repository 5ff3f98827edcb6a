"""Deterministic synthetic color-grid tasks with answers derivable by rule.

An image is a grid of one-hot color patches plus small seeded noise. Three
question types share one vocabulary: name the majority color, report the
bucketed count of a named color, or produce a full caption (majority color
followed by every color's count bucket). The generator resamples until the
majority leads by at least two patches and clips the pixel noise well below
the one-hot gap, so no sample's answer is ever ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .routing import MultimodalSequence, build_mask
from .tensor import Tensor

NOISE_STD = 0.05
NOISE_CLIP = 0.4  # keeps every patch's argmax channel intact
MAJORITY_MARGIN = 2
N_BUCKETS = 4

TASK_MAJORITY = "majority"
TASK_COUNT = "count"
TASK_CAPTION = "caption"
ALL_TASKS = (TASK_MAJORITY, TASK_COUNT, TASK_CAPTION)


@dataclass(frozen=True)
class TokenVocab:
    """Fixed token layout: colors, count buckets, then question markers."""

    n_colors: int
    vocab_size: int

    def __post_init__(self):
        if self.n_colors < 2:
            raise ConfigError(f"need at least two colors, got {self.n_colors}")
        if self.vocab_size < self.required_size:
            raise ConfigError(
                f"vocabulary of {self.vocab_size} too small, need {self.required_size}"
            )

    @property
    def required_size(self) -> int:
        return self.n_colors + N_BUCKETS + 3

    def color(self, c: int) -> int:
        return c

    def bucket(self, b: int) -> int:
        return self.n_colors + b

    @property
    def q_majority(self) -> int:
        return self.n_colors + N_BUCKETS

    @property
    def q_count(self) -> int:
        return self.n_colors + N_BUCKETS + 1

    @property
    def q_caption(self) -> int:
        return self.n_colors + N_BUCKETS + 2


def count_bucket(count: int, n_patches: int) -> int:
    """Bucket index for a color count; quarters of the patch budget."""
    width = max(1, n_patches // N_BUCKETS)
    return min(count // width, N_BUCKETS - 1)


@dataclass(frozen=True)
class SyntheticSample:
    task: str
    image: Tensor
    color_grid: np.ndarray
    question_ids: np.ndarray
    answer_ids: np.ndarray
    sequence: MultimodalSequence


def _pick_task(rng: np.random.Generator, task_mix: dict[str, float]) -> str:
    names = sorted(task_mix)
    if not names:
        raise ConfigError("task mix is empty")
    bad = [n for n in names if n not in ALL_TASKS]
    if bad:
        raise ConfigError(f"unknown tasks in mix: {bad}")
    weights = np.array([float(task_mix[n]) for n in names])
    if (weights < 0).any() or weights.sum() <= 0:
        raise ConfigError(f"task weights must be nonnegative with positive sum, got {task_mix}")
    return names[rng.choice(len(names), p=weights / weights.sum())]


def gen_sample(
    seed,
    task_mix: dict[str, float],
    *,
    grid: int,
    channels: int,
    n_visual_tokens: int,
    vocab: TokenVocab,
) -> SyntheticSample:
    """One fully assembled sample, bit-identical for identical seeds."""
    if channels < 2 or grid < 2:
        raise ConfigError(f"grid and channels must both be at least 2, got ({grid}, {channels})")
    if channels != vocab.n_colors:
        raise ConfigError(f"channels ({channels}) must match vocabulary colors ({vocab.n_colors})")
    rng = np.random.default_rng(seed)
    task = _pick_task(rng, task_mix)

    n_patches = grid * grid
    while True:
        colors = rng.integers(0, channels, size=(grid, grid))
        counts = np.bincount(colors.reshape(-1), minlength=channels)
        order = np.argsort(counts)
        if counts[order[-1]] - counts[order[-2]] >= MAJORITY_MARGIN:
            break
    majority = int(order[-1])

    onehot = np.zeros((grid, grid, channels))
    gi, gj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    onehot[gi, gj, colors] = 1.0
    noise = np.clip(rng.normal(0.0, NOISE_STD, size=onehot.shape), -NOISE_CLIP, NOISE_CLIP)
    image = Tensor(onehot + noise)

    if task == TASK_MAJORITY:
        question = [vocab.q_majority]
        answer = [vocab.color(majority)]
    elif task == TASK_COUNT:
        which = int(rng.integers(0, channels))
        question = [vocab.q_count, vocab.color(which)]
        answer = [vocab.bucket(count_bucket(int(counts[which]), n_patches))]
    else:
        question = [vocab.q_caption]
        answer = [vocab.color(majority)] + [
            vocab.bucket(count_bucket(int(counts[c]), n_patches)) for c in range(channels)
        ]

    ids = np.asarray(question + answer, dtype=np.int64)
    mask = build_mask(n_visual_tokens, ids.size)
    loss_mask = np.zeros(len(mask), dtype=bool)
    loss_mask[n_visual_tokens + len(question):] = True
    sequence = MultimodalSequence(
        visual_span=range(0, n_visual_tokens),
        language_token_ids=ids,
        mask=mask,
        loss_mask=loss_mask,
    )
    return SyntheticSample(
        task=task,
        image=image,
        color_grid=colors,
        question_ids=np.asarray(question, dtype=np.int64),
        answer_ids=np.asarray(answer, dtype=np.int64),
        sequence=sequence,
    )
