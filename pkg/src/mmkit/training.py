"""Masked next-token loss, AdamW, stage schedules, and the two-stage trainer.

A stage trains only its declared parameter groups, each at its own learning
rate: alignment pretraining updates the VL adapter and the ladder (adapters
in the decoder optionally join), instruction fine-tuning updates all three.
Frozen weights are hash-checked around every stage. Data is streamed from
the synthetic generator, one fresh seed per (stage seed, step, batch slot),
so a (seed, config) pair pins the entire loss trace bit for bit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import SyntheticSample, TokenVocab, gen_sample
from .decoder import MMDecoder, generate_greedy
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .routing import MultimodalSequence, build_mask
from .tensor import Tensor, active_tape, backward, content_hash, masked_cross_entropy, no_grad, scale
from .vision import VisualTower

log = logging.getLogger("mmkit")

STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune"
STAGE_INDEX = {STAGE_PRETRAIN: 0, STAGE_FINETUNE: 1}
GROUP_ADAPTER = "adapter"
GROUP_QLADDER = "qladder"
GROUP_MM_LORA = "mm_lora"
KNOWN_GROUPS = (GROUP_ADAPTER, GROUP_QLADDER, GROUP_MM_LORA)


def masked_ce_loss(logits: Tensor, sequence: MultimodalSequence) -> Tensor:
    """Mean next-token cross-entropy over supervised (answer) positions.

    A position p with loss_mask set is predicted from the logits at p-1.
    """
    total = len(sequence)
    if logits.shape[0] != total:
        raise ShapeError(f"logits cover {logits.shape[0]} positions, sequence has {total}")
    n_vis = sequence.mask.n_visual
    pred_mask = np.zeros(total, dtype=bool)
    targets = np.zeros(total, dtype=np.intp)
    for p in np.flatnonzero(sequence.loss_mask):
        if p == 0:
            raise ContractError("the first position has no preceding logits to supervise")
        pred_mask[p - 1] = True
        targets[p - 1] = sequence.language_token_ids[p - n_vis]
    return masked_cross_entropy(logits, targets, pred_mask)


@dataclass
class StageConfig:
    """One stage's schedule: what trains, at which rates, on which stream."""

    stage: str
    steps: int
    batch_size: int
    seed: int
    learning_rates: dict[str, float]
    task_mix: dict[str, float]
    train_mm_lora: bool = False  # pretrain-only switch; fine-tuning always trains adapters
    weight_decay: float = 0.01
    warmup_frac: float = 0.05

    def __post_init__(self):
        if self.stage not in (STAGE_PRETRAIN, STAGE_FINETUNE):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size <= 0:
            raise ConfigError(f"bad schedule: steps={self.steps}, batch_size={self.batch_size}")
        unknown = set(self.learning_rates) - set(KNOWN_GROUPS)
        if unknown:
            raise ConfigError(f"learning rates given for unknown groups: {sorted(unknown)}")
        missing = [g for g in self.trainable_group_names() if g not in self.learning_rates]
        if missing:
            raise ConfigError(f"missing learning rates for groups: {missing}")

    def trainable_group_names(self) -> list[str]:
        if self.stage == STAGE_PRETRAIN:
            groups = [GROUP_QLADDER, GROUP_ADAPTER]
            if self.train_mm_lora:
                groups.append(GROUP_MM_LORA)
            return groups
        return [GROUP_QLADDER, GROUP_ADAPTER, GROUP_MM_LORA]


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    lr: float
    weight_decay: float = 0.01


class AdamW:
    """Decoupled weight decay Adam over named parameter groups."""

    def __init__(self, groups: list[ParamGroup], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._moments = {}
        for group in groups:
            for name, p in group.params.items():
                self._moments[name] = (np.zeros(p.shape), np.zeros(p.shape))

    def step(self, lr_scale: float = 1.0) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for group in self.groups:
            lr = group.lr * lr_scale
            for name, p in group.params.items():
                if p.grad is None:
                    continue
                m, v = self._moments[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad**2
                if group.weight_decay:
                    p.data *= 1.0 - lr * group.weight_decay
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params.values():
                p.grad = None


class MultimodalLM:
    """Visual tower plus adapter-injected decoder, trained as one system."""

    def __init__(self, tower: VisualTower, decoder: MMDecoder, vocab: TokenVocab):
        if tower.cfg.out_width != decoder.config.hidden:
            raise ConfigError(
                f"tower output width {tower.cfg.out_width} does not match decoder width "
                f"{decoder.config.hidden}"
            )
        if vocab.vocab_size != decoder.config.vocab:
            raise ConfigError("vocabulary size does not match the decoder's")
        self.tower = tower
        self.decoder = decoder
        self.vocab = vocab

    # -- data plumbing -----------------------------------------------------

    def sample(self, seed, task_mix, use_qladder: bool | None = None) -> SyntheticSample:
        return gen_sample(
            seed,
            task_mix,
            grid=self.tower.cfg.grid,
            channels=self.tower.cfg.channels,
            n_visual_tokens=self.tower.n_visual_tokens(use_qladder),
            vocab=self.vocab,
        )

    # -- forward paths -----------------------------------------------------

    def forward_sample(
        self,
        sample: SyntheticSample,
        capture_attention: bool = False,
        adapters_enabled: bool = True,
        use_qladder: bool | None = None,
    ):
        feats = self.tower.forward(sample.image, use_qladder)
        if feats.shape[0] != sample.sequence.mask.n_visual:
            raise ShapeError(
                f"sample was assembled for {sample.sequence.mask.n_visual} visual tokens, "
                f"tower produced {feats.shape[0]}"
            )
        return self.decoder.forward(
            feats,
            sample.sequence.language_token_ids,
            sample.sequence.mask,
            capture_attention=capture_attention,
            adapters_enabled=adapters_enabled,
        )

    def loss_on(self, sample: SyntheticSample, adapters_enabled: bool = True) -> Tensor:
        logits, _ = self.forward_sample(sample, adapters_enabled=adapters_enabled)
        return masked_ce_loss(logits, sample.sequence)

    def generate_answer(
        self,
        sample: SyntheticSample,
        max_new: int | None = None,
        adapters_enabled: bool = True,
        use_qladder: bool | None = None,
    ) -> np.ndarray:
        """Greedy continuation of the question prompt (answer tokens withheld)."""
        n_vis = self.tower.n_visual_tokens(use_qladder)
        prompt_mask = build_mask(n_vis, len(sample.question_ids))
        with no_grad():
            feats = self.tower.forward(sample.image, use_qladder)
        return generate_greedy(
            self.decoder,
            feats,
            sample.question_ids,
            prompt_mask,
            max_new=len(sample.answer_ids) if max_new is None else max_new,
            adapters_enabled=adapters_enabled,
        )

    # -- parameter bookkeeping ----------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        groups = {
            name: {f"tower.{k}": v for k, v in params.items()}
            for name, params in self.tower.parameter_groups().items()
        }
        for name, params in self.decoder.adapter_parameter_groups().items():
            groups[name] = {f"decoder.{k}": v for k, v in params.items()}
        return groups

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        for params in self.parameter_groups().values():
            out.update(params)
        return out

    def frozen_parameters(self) -> dict[str, Tensor]:
        out = {f"tower.{k}": v for k, v in self.tower.named_frozen().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.base_parameters().items()})
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.frozen_parameters()
        out.update(self.trainable_parameters())
        return out

    def frozen_hash(self) -> str:
        return content_hash(self.frozen_parameters())

    def param_counts(self) -> dict[str, int]:
        counts = {name: sum(t.size for t in params.values()) for name, params in self.parameter_groups().items()}
        counts["frozen"] = sum(t.size for t in self.frozen_parameters().values())
        counts["trainable"] = sum(v for k, v in counts.items() if k != "frozen")
        return counts


@dataclass
class StageResult:
    stage: str
    loss_trace: list[float] = field(default_factory=list)
    duration_s: float = 0.0


def batch_loss(model: MultimodalLM, samples) -> Tensor:
    total = None
    for sample in samples:
        loss = model.loss_on(sample)
        total = loss if total is None else total + loss
    return scale(total, 1.0 / len(samples))


def run_stage(model: MultimodalLM, cfg: StageConfig, checkpoint_path=None) -> StageResult:
    """Train one stage; verifies frozen weights and streams deterministic data."""
    available = model.parameter_groups()
    groups = []
    for name in cfg.trainable_group_names():
        if name not in available:
            log.info("stage %s: group %s not present in this model, skipping", cfg.stage, name)
            continue
        groups.append(
            ParamGroup(name, available[name], lr=cfg.learning_rates[name], weight_decay=cfg.weight_decay)
        )
    if not groups:
        raise ConfigError(f"stage {cfg.stage} has nothing to train")

    hash_before = model.frozen_hash()
    opt = AdamW(groups)
    warmup_steps = max(1, round(cfg.warmup_frac * cfg.steps)) if cfg.warmup_frac > 0 else 0
    result = StageResult(stage=cfg.stage)
    started = time.perf_counter()
    stage_idx = STAGE_INDEX[cfg.stage]
    for step in range(cfg.steps):
        samples = [
            model.sample(np.random.SeedSequence((cfg.seed, stage_idx, step, i)), cfg.task_mix)
            for i in range(cfg.batch_size)
        ]
        loss = batch_loss(model, samples)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite loss {value!r} at {cfg.stage} step {step} "
                f"(groups: {[g.name for g in groups]}, lrs: {cfg.learning_rates})"
            )
        backward(loss)
        lr_scale = min(1.0, (step + 1) / warmup_steps) if warmup_steps else 1.0
        opt.step(lr_scale)
        opt.zero_grad()
        active_tape().clear()
        result.loss_trace.append(value)
        if step % 100 == 0:
            log.debug("%s step %d loss %.4f", cfg.stage, step, value)
    result.duration_s = time.perf_counter() - started

    if model.frozen_hash() != hash_before:
        raise ContractError(f"frozen weights changed during {cfg.stage}")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.named_tensors())
    log.info(
        "%s: %d steps in %.1fs, loss %.4f -> %.4f",
        cfg.stage,
        cfg.steps,
        result.duration_s,
        result.loss_trace[0] if result.loss_trace else float("nan"),
        result.loss_trace[-1] if result.loss_trace else float("nan"),
    )
    return result


def evaluate(
    model: MultimodalLM,
    n_samples: int,
    seed: int,
    task_mix: dict[str, float],
    adapters_enabled: bool = True,
) -> tuple[float, float]:
    """(exact-match accuracy, mean loss) on held-out seeds, greedy decoding."""
    hits = 0
    losses = []
    for i in range(n_samples):
        sample = model.sample(np.random.SeedSequence((seed, i)), task_mix)
        with no_grad():
            losses.append(model.loss_on(sample, adapters_enabled=adapters_enabled).item())
        produced = model.generate_answer(sample, adapters_enabled=adapters_enabled)
        hits += int(np.array_equal(produced, sample.answer_ids))
    return hits / n_samples, float(np.mean(losses))
