"""Experiment orchestration: training runs, ablation sweeps, audits, exports.

Each function here backs one CLI command and returns plain dictionaries or
dataclasses; all file output (results.json, ablation.csv, attention CSVs,
checkpoints) is written under the run's output directory so a bundle is
self-describing: every number sits next to the config and seed it came from.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import ExperimentConfig, config_from_dict
from .data import TASK_MAJORITY, TokenVocab
from .decoder import DecoderConfig, attention_mass, inject_mmlora
from .errors import ConfigError, ContractError
from .gradcheck import GradCheckReport, finite_diff_check
from .lora import MMLoRAConfig
from .routing import build_mask
from .tensor import Tensor, no_grad
from .training import (
    STAGE_FINETUNE,
    STAGE_PRETRAIN,
    MultimodalLM,
    StageConfig,
    evaluate,
    run_stage,
)
from .vision import TowerConfig, VisualTower

log = logging.getLogger("mmkit")

CHECKPOINT_NAME = "model.arc1"
RESULTS_NAME = "results.json"
ABLATION_NAME = "ablation.csv"
ATTENTION_VARIANTS = ("base", "mm_lora", "mm_lora_qladder")


# ---------------------------------------------------------------------------
# model assembly


def build_model(cfg: ExperimentConfig) -> MultimodalLM:
    """Seeded tower + decoder pair described by the config."""
    ss = np.random.SeedSequence(cfg.train.seed)
    tower_ss, decoder_ss = ss.spawn(2)
    tower_cfg = TowerConfig(
        grid=cfg.vision.grid,
        channels=cfg.vision.channels,
        width=cfg.vision.width,
        heads=cfg.vision.heads,
        blocks=cfg.vision.blocks,
        ladder_layers=cfg.vision.ladder_layers,
        n_query=cfg.vision.n_query,
        adapter_hidden=cfg.vision.adapter_hidden,
        out_width=cfg.model.hidden,
        use_qladder=cfg.vision.use_qladder,
    )
    decoder_cfg = DecoderConfig(
        n_layers=cfg.model.n_layers,
        n_heads=cfg.model.n_heads,
        hidden=cfg.model.hidden,
        ffn_width=cfg.model.ffn_width,
        vocab=cfg.model.vocab,
        max_seq=cfg.model.max_seq,
    )
    lora = cfg.model.lora
    lora_cfg = None
    if lora.mode != "none":
        lora_cfg = MMLoRAConfig(lora.rank, lora.beta, lora.gamma, lora.alpha)
    tower = VisualTower.create(tower_cfg, tower_ss)
    decoder = inject_mmlora(decoder_cfg, lora_cfg, decoder_ss, lora.mode)
    vocab = TokenVocab(cfg.vision.channels, cfg.model.vocab)
    return MultimodalLM(tower, decoder, vocab)


def with_updates(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    """Shallow override helper for nested frozen settings.

    Supported keys: seed, out_dir, lora_mode, beta, gamma, n_query,
    use_qladder, pretrain_steps, finetune_steps.
    """
    model, vision, train, output = cfg.model, cfg.vision, cfg.train, cfg.output
    if "seed" in updates:
        train = dataclasses.replace(train, seed=int(updates["seed"]))
    if "out_dir" in updates:
        output = dataclasses.replace(output, directory=str(updates["out_dir"]))
    if "lora_mode" in updates:
        model = dataclasses.replace(model, lora=dataclasses.replace(model.lora, mode=updates["lora_mode"]))
    if "beta" in updates:
        beta = float(updates["beta"])
        model = dataclasses.replace(
            model, lora=dataclasses.replace(model.lora, beta=beta, gamma=updates.get("gamma", 1.0 - beta))
        )
    if "n_query" in updates:
        vision = dataclasses.replace(vision, n_query=int(updates["n_query"]))
    if "use_qladder" in updates:
        vision = dataclasses.replace(vision, use_qladder=bool(updates["use_qladder"]))
    if "pretrain_steps" in updates:
        train = dataclasses.replace(train, pretrain=dataclasses.replace(train.pretrain, steps=int(updates["pretrain_steps"])))
    if "finetune_steps" in updates:
        train = dataclasses.replace(train, finetune=dataclasses.replace(train.finetune, steps=int(updates["finetune_steps"])))
    return ExperimentConfig(model=model, vision=vision, train=train, output=output)


def stage_config(cfg: ExperimentConfig, stage: str, arcana_star: bool | None = None) -> StageConfig:
    settings = cfg.train.pretrain if stage == STAGE_PRETRAIN else cfg.train.finetune
    star = settings.train_mm_lora if arcana_star is None else arcana_star
    return StageConfig(
        stage=stage,
        steps=settings.steps,
        batch_size=settings.batch_size,
        seed=cfg.train.seed,
        learning_rates=dict(settings.learning_rates),
        task_mix=dict(settings.task_mix),
        train_mm_lora=star if stage == STAGE_PRETRAIN else True,
    )


def plain_lora_equivalent_count(cfg: ExperimentConfig) -> int:
    """Trainable count of a rank-R unrouted adapter on every projection."""
    c, f, r = cfg.model.hidden, cfg.model.ffn_width, cfg.model.lora.rank
    per_layer = 4 * r * (c + c) + r * (c + f) + r * (f + c)
    return cfg.model.n_layers * per_layer


# ---------------------------------------------------------------------------
# train


def run_training(
    cfg: ExperimentConfig,
    stage: str = "both",
    arcana_star: bool | None = None,
    out_dir=None,
) -> dict:
    """Full train command: stages per schedule, eval, checkpoint, results.json."""
    if stage not in ("both", STAGE_PRETRAIN, STAGE_FINETUNE):
        raise ConfigError(f"unknown stage selector {stage!r}")
    out = Path(out_dir if out_dir is not None else cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    model = build_model(cfg)

    counts = model.param_counts()
    parity = None
    if cfg.model.lora.mode == "mm":
        parity = plain_lora_equivalent_count(cfg)
        if counts.get("mm_lora", 0) != parity:
            raise ContractError(
                f"adapter parameter count {counts.get('mm_lora')} broke parity with "
                f"the rank-{cfg.model.lora.rank} baseline count {parity}"
            )

    stages = {}
    wanted = [STAGE_PRETRAIN, STAGE_FINETUNE] if stage == "both" else [stage]
    for name in wanted:
        result = run_stage(model, stage_config(cfg, name, arcana_star))
        stages[name] = {
            "steps": len(result.loss_trace),
            "loss_trace": result.loss_trace,
            "duration_s": result.duration_s,
        }

    accuracy, mean_loss = evaluate(
        model, cfg.train.eval_samples, cfg.train.seed, dict(cfg.train.finetune.task_mix)
    )
    results = {
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "stage_selector": stage,
        "arcana_star": stage_config(cfg, STAGE_PRETRAIN, arcana_star).train_mm_lora,
        "stages": stages,
        "eval": {"accuracy": accuracy, "mean_loss": mean_loss, "n_samples": cfg.train.eval_samples},
        "params": counts,
        "parity": {"mm_lora_trainable": counts.get("mm_lora", 0), "plain_lora_equivalent": parity},
        "wall_time_s": time.perf_counter() - started,
    }
    save_checkpoint(out / CHECKPOINT_NAME, model.named_tensors())
    _write_json(out / RESULTS_NAME, results)
    log.info("train: accuracy %.3f, results in %s", accuracy, out)
    return results


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# ablation sweeps


def _train_and_eval_variant(cfg: ExperimentConfig) -> dict:
    """One sweep point: both stages plus held-out evaluation."""
    started = time.perf_counter()
    model = build_model(cfg)
    for name in (STAGE_PRETRAIN, STAGE_FINETUNE):
        result = run_stage(model, stage_config(cfg, name))
        final_loss = result.loss_trace[-1] if result.loss_trace else float("nan")
    accuracy, mean_loss = evaluate(
        model, cfg.train.eval_samples, cfg.train.seed, dict(cfg.train.finetune.task_mix)
    )
    counts = model.param_counts()
    return {
        "accuracy": accuracy,
        "eval_loss": mean_loss,
        "final_train_loss": final_loss,
        "trainable_params": counts.get("mm_lora", 0),
        "wall_time_s": time.perf_counter() - started,
    }


def _variant_worker(payload):
    raw, updates = payload
    return _train_and_eval_variant(with_updates(config_from_dict(raw), **updates))


def _run_variants(cfg: ExperimentConfig, updates_list, parallel: int) -> list[dict]:
    if parallel > 1:
        jobs = [(_effective_raw(cfg), updates) for updates in updates_list]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_variant_worker, jobs))
    return [_train_and_eval_variant(with_updates(cfg, **updates)) for updates in updates_list]


def _effective_raw(cfg: ExperimentConfig) -> dict:
    raw = cfg.to_dict()
    # to_dict carries the nested lora dataclass already flattened by asdict
    return raw


def run_rank_ablation(cfg: ExperimentConfig, betas, out_dir=None, parallel: int = 1) -> list[dict]:
    """Rank-split sweep plus the unrouted baseline, identical seeds and data.

    Emits one CSV row per model; every row must report the same trainable
    parameter count, which is asserted, not just recorded.
    """
    out = Path(out_dir if out_dir is not None else cfg.output.directory)
    rank = cfg.model.lora.rank
    specs = [{"method": "lora", "beta": "", "gamma": "", "updates": {"lora_mode": "plain"}}]
    for beta in betas:
        frac_v, frac_t = beta * rank, (1.0 - beta) * rank
        if abs(frac_v - round(frac_v)) > 1e-9 or abs(frac_t - round(frac_t)) > 1e-9:
            log.warning("skipping beta=%s: ranks %.3f/%.3f are not integers", beta, frac_v, frac_t)
            continue
        specs.append(
            {"method": "mm_lora", "beta": beta, "gamma": 1.0 - beta, "updates": {"lora_mode": "mm", "beta": beta}}
        )

    results = _run_variants(cfg, [s["updates"] for s in specs], parallel)
    rows = []
    for spec, res in zip(specs, results):
        rows.append(
            {
                "method": spec["method"],
                "beta": spec["beta"],
                "gamma": spec["gamma"],
                "rank": rank,
                "trainable_params": res["trainable_params"],
                "accuracy": res["accuracy"],
                "final_train_loss": res["final_train_loss"],
                "eval_loss": res["eval_loss"],
                "wall_time_s": res["wall_time_s"],
            }
        )
    counts = {row["trainable_params"] for row in rows}
    if len(counts) != 1:
        raise ContractError(f"sweep rows report unequal trainable counts: {sorted(counts)}")
    _write_csv(out / ABLATION_NAME, rows)
    return rows


def run_query_ablation(cfg: ExperimentConfig, n_queries, out_dir=None, parallel: int = 1) -> list[dict]:
    """Query-count sweep plus a no-ladder baseline; reports visual token counts."""
    out = Path(out_dir if out_dir is not None else cfg.output.directory)
    n_patches = cfg.vision.grid * cfg.vision.grid
    specs = [{"method": "baseline", "n_query": "", "visual_tokens": n_patches, "updates": {"use_qladder": False}}]
    for n_q in n_queries:
        if n_q >= n_patches:
            log.warning("skipping n_query=%d: must stay below the %d patches", n_q, n_patches)
            continue
        specs.append(
            {
                "method": "qladder",
                "n_query": n_q,
                "visual_tokens": n_patches + n_q,
                "updates": {"use_qladder": True, "n_query": n_q},
            }
        )

    results = _run_variants(cfg, [s["updates"] for s in specs], parallel)
    rows = []
    for spec, res in zip(specs, results):
        rows.append(
            {
                "method": spec["method"],
                "n_query": spec["n_query"],
                "visual_tokens": spec["visual_tokens"],
                "accuracy": res["accuracy"],
                "final_train_loss": res["final_train_loss"],
                "eval_loss": res["eval_loss"],
                "wall_time_s": res["wall_time_s"],
            }
        )
    _write_csv(out / ABLATION_NAME, rows)
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# gradient audit


def run_grad_check(
    cfg: ExperimentConfig,
    eps: float = 1e-5,
    tol: float = 1e-5,
    min_entries_per_group: int = 20,
) -> GradCheckReport:
    """Finite-difference audit of every trainable group on one fixed sample.

    Samples entries from every tensor of every group, so each adapter side,
    the ladder queries, attention and FFN weights, and both adapter MLP
    layers all get probed.
    """
    model = build_model(cfg)
    sample = model.sample(np.random.SeedSequence((cfg.train.seed, 99)), {TASK_MAJORITY: 1.0})

    def objective():
        return model.loss_on(sample)

    params: dict[str, Tensor] = {}
    per_param: dict[str, int] = {}
    for group_name, group in sorted(model.parameter_groups().items()):
        if not group:
            log.info("grad-check: group %s is empty, nothing to probe", group_name)
            continue
        per_tensor = max(2, -(-min_entries_per_group // len(group)))
        for name, tensor in sorted(group.items()):
            params[f"{group_name}:{name}"] = tensor
            per_param[f"{group_name}:{name}"] = per_tensor

    rng = np.random.default_rng(np.random.SeedSequence((cfg.train.seed, 4242)))
    report = GradCheckReport(eps=eps, tol=tol)
    for name, tensor in params.items():
        partial = finite_diff_check(
            objective, {name: tensor}, eps=eps, tol=tol, entries_per_param=per_param[name], rng=rng
        )
        report.params.extend(partial.params)
    return report


# ---------------------------------------------------------------------------
# attention export


def run_attn_export(
    cfg: ExperimentConfig,
    checkpoint_path=None,
    sample_seed: int = 0,
    task: str = TASK_MAJORITY,
    max_new: int = 4,
    out_dir=None,
) -> dict:
    """Fig-style attention maps for the three mechanism combinations.

    One trained model is exported three ways: frozen base only, base plus
    decoder adapters, and base plus adapters plus ladder tokens. Per variant
    the full post-generation attention is written as one head-averaged CSV
    per layer, plus a shared per-layer visual/language mass summary.
    """
    out = Path(out_dir if out_dir is not None else cfg.output.directory)
    model = build_model(cfg)
    if checkpoint_path is not None:
        restore_into(model.named_tensors(), load_checkpoint(checkpoint_path))

    variants = {
        "base": {"adapters_enabled": False, "use_qladder": False},
        "mm_lora": {"adapters_enabled": True, "use_qladder": False},
        "mm_lora_qladder": {"adapters_enabled": True, "use_qladder": model.tower.qladder is not None},
    }
    summary_rows = []
    result = {"configurations": {}}
    for name, flags in variants.items():
        sample = model.sample(
            np.random.SeedSequence((sample_seed, 7)), {task: 1.0}, use_qladder=flags["use_qladder"]
        )
        generated = model.generate_answer(
            sample,
            max_new=max_new,
            adapters_enabled=flags["adapters_enabled"],
            use_qladder=flags["use_qladder"],
        )
        ids = np.concatenate([sample.question_ids, generated])
        n_vis = model.tower.n_visual_tokens(flags["use_qladder"])
        mask = build_mask(n_vis, ids.size)
        with no_grad():
            feats = model.tower.forward(sample.image, flags["use_qladder"])
            _, record = model.decoder.forward(
                feats, ids, mask, capture_attention=True, adapters_enabled=flags["adapters_enabled"]
            )
        masses = attention_mass(record, mask)
        variant_dir = out / name
        variant_dir.mkdir(parents=True, exist_ok=True)
        for layer in range(record.n_layers):
            np.savetxt(variant_dir / f"attn_layer{layer}.csv", record.layer_mean(layer), fmt="%.17g", delimiter=",")
        for layer, (vis, lang) in enumerate(masses):
            summary_rows.append(
                {"configuration": name, "layer": layer, "visual_mass": vis, "language_mass": lang}
            )
        result["configurations"][name] = {
            "seq_len": record.seq_len,
            "n_visual_tokens": n_vis,
            "generated_ids": [int(t) for t in generated],
            "masses": [[vis, lang] for vis, lang in masses],
        }
    _write_csv(out / "attention_mass.csv", summary_rows)
    _write_json(out / "attention_summary.json", result)
    return result


# ---------------------------------------------------------------------------
# parameter audit


def run_param_audit(cfg: ExperimentConfig) -> dict:
    model = build_model(cfg)
    counts = model.param_counts()
    parity = plain_lora_equivalent_count(cfg)
    return {
        "groups": {k: v for k, v in counts.items() if k not in ("trainable", "frozen")},
        "trainable": counts["trainable"],
        "frozen": counts["frozen"],
        "plain_lora_equivalent": parity,
        "parity_holds": counts.get("mm_lora", 0) == parity if cfg.model.lora.mode == "mm" else None,
    }
