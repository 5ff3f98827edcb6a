"""Command-line entry point.

Commands: train, ablate-rank, ablate-queries, grad-check, attn-export,
param-audit. Exit codes are a stable contract: 0 success, 2 configuration
error, 3 numeric failure, 4 I/O failure. ARC_LOG={error,info,debug} selects
the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config
from .errors import ConfigError, EmptyLossError, EmptySequenceError, NumericError, ShapeError
from .experiment import (
    run_attn_export,
    run_grad_check,
    run_param_audit,
    run_query_ablation,
    run_rank_ablation,
    run_training,
    with_updates,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DEFAULT_BETAS = "1,0.75,0.5,0.25,0"
DEFAULT_QUERIES = "4,8,16"

log = logging.getLogger("mmkit")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", default=None, help="JSON config; defaults are used if absent")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", metavar="DIR", default=None, help="override output.directory")

    p_train = sub.add_parser("train", help="run the two-stage schedule and evaluate")
    common(p_train)
    p_train.add_argument("--stage", choices=("pretrain", "finetune", "both"), default="both")
    p_train.add_argument(
        "--arcana-star", type=_parse_bool, default=None, metavar="BOOL",
        help="also train the decoder adapters during pretraining",
    )
    p_train.set_defaults(func=_cmd_train)

    p_rank = sub.add_parser("ablate-rank", help="sweep the visual/language rank split")
    common(p_rank)
    p_rank.add_argument("--betas", type=_parse_floats, default=None, metavar="LIST",
                        help=f"comma list of visual fractions (default {DEFAULT_BETAS})")
    p_rank.add_argument("--parallel", type=int, default=1, metavar="N")
    p_rank.set_defaults(func=_cmd_ablate_rank)

    p_query = sub.add_parser("ablate-queries", help="sweep the ladder query count")
    common(p_query)
    p_query.add_argument("--n-queries", type=_parse_ints, default=None, metavar="LIST",
                         help=f"comma list of query counts (default {DEFAULT_QUERIES})")
    p_query.add_argument("--parallel", type=int, default=1, metavar="N")
    p_query.set_defaults(func=_cmd_ablate_queries)

    p_grad = sub.add_parser("grad-check", help="finite-difference audit of all trainable groups")
    common(p_grad)
    p_grad.add_argument("--eps", type=float, default=1e-5)
    p_grad.add_argument("--tol", type=float, default=1e-5)
    p_grad.set_defaults(func=_cmd_grad_check)

    p_attn = sub.add_parser("attn-export", help="export attention maps for the mechanism combinations")
    common(p_attn)
    p_attn.add_argument("--checkpoint", metavar="PATH", default=None)
    p_attn.add_argument("--sample-seed", type=int, default=0)
    p_attn.add_argument("--task", choices=("majority", "count", "caption"), default="majority")
    p_attn.add_argument("--max-new", type=int, default=4)
    p_attn.set_defaults(func=_cmd_attn_export)

    p_audit = sub.add_parser("param-audit", help="report trainable/frozen counts and adapter parity")
    common(p_audit)
    p_audit.set_defaults(func=_cmd_param_audit)
    return parser


def _load(args):
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    return with_updates(cfg, **updates) if updates else cfg


def _cmd_train(args) -> int:
    results = run_training(_load(args), stage=args.stage, arcana_star=args.arcana_star)
    print(json.dumps({"accuracy": results["eval"]["accuracy"], "params": results["params"]}, indent=2))
    return EXIT_OK


def _cmd_ablate_rank(args) -> int:
    betas = args.betas if args.betas is not None else _parse_floats(DEFAULT_BETAS)
    rows = run_rank_ablation(_load(args), betas, parallel=args.parallel)
    for row in rows:
        print(f"{row['method']:8s} beta={row['beta']!s:5s} acc={row['accuracy']:.3f} params={row['trainable_params']}")
    return EXIT_OK


def _cmd_ablate_queries(args) -> int:
    queries = args.n_queries if args.n_queries is not None else _parse_ints(DEFAULT_QUERIES)
    rows = run_query_ablation(_load(args), queries, parallel=args.parallel)
    for row in rows:
        print(f"{row['method']:8s} n_q={row['n_query']!s:4s} tokens={row['visual_tokens']} acc={row['accuracy']:.3f}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    report = run_grad_check(_load(args), eps=args.eps, tol=args.tol)
    for line in report.summary_lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _cmd_attn_export(args) -> int:
    result = run_attn_export(
        _load(args),
        checkpoint_path=args.checkpoint,
        sample_seed=args.sample_seed,
        task=args.task,
        max_new=args.max_new,
    )
    for name, info in result["configurations"].items():
        print(f"{name}: {info['seq_len']} positions, {len(info['masses'])} layers exported")
    return EXIT_OK


def _cmd_param_audit(args) -> int:
    print(json.dumps(run_param_audit(_load(args)), indent=2))
    return EXIT_OK


def _configure_logging() -> None:
    level_name = os.environ.get("ARC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: unknown ARC_LOG level {level_name!r}, using info", file=sys.stderr)
    logging.basicConfig(
        level=levels.get(level_name, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, EmptyLossError, EmptySequenceError, ShapeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
