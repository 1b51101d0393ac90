"""Command-line entry point.

    mmembed gen-data  --out data/
    mmembed cpt       --data data/ --out runs/cpt
    mmembed finetune  --data data/ --out runs/cl --init-from runs/cpt/cpt.ckpt
    mmembed eval      --data data/ --checkpoint runs/cl/cl.ckpt --out runs/eval
    mmembed embed     --checkpoint runs/cl/cl.ckpt --input seqs.jsonl --out vecs.jsonl

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import RunConfig, load_config
from .errors import ConfigError, EvaluationError, GenerationError, InputError, MaskError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mmembed")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which is reserved for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def _toggles(p: argparse.ArgumentParser, names: list[str]) -> None:
    flags = {
        "mlm_on": ("--no-mlm", "disable the masked-token objective"),
        "mae_on": ("--no-mae", "disable the masked-patch objective"),
        "text_pairs_on": ("--no-text-pairs", "drop text-only pairs"),
        "longform_pairs_on": ("--no-longform-pairs", "drop long-form document pairs"),
        "task_batching_on": ("--no-task-batching", "mix tasks within batches"),
    }
    for name in names:
        flag, help_ = flags[name]
        p.add_argument(flag, dest=name, action="store_false", default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmembed", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _common(p)
    p.add_argument("--out", help="output directory (default: run.data_dir)")

    p = sub.add_parser("cpt", help="continual pre-training")
    _common(p)
    _toggles(p, ["mlm_on", "mae_on"])
    p.add_argument("--data", help="dataset directory (default: run.data_dir)")
    p.add_argument("--out", help="run directory (default: run.out_dir/cpt)")

    p = sub.add_parser("finetune", help="contrastive fine-tuning")
    _common(p)
    _toggles(p, ["text_pairs_on", "longform_pairs_on", "task_batching_on"])
    p.add_argument("--data")
    p.add_argument("--out", help="run directory (default: run.out_dir/finetune)")
    p.add_argument("--init-from", help="checkpoint to initialise the backbone from")

    p = sub.add_parser("eval", help="retrieval evaluation")
    _common(p)
    p.add_argument("--data", help="dataset directory whose eval/ tasks are used")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", nargs="*", help="task directories (queries/pool/qrels.jsonl)")
    p.add_argument("--mode", choices=["bidirectional", "causal"], default="bidirectional")
    p.add_argument("--out", help="results directory (default: run.out_dir/eval)")

    p = sub.add_parser("embed", help="export embeddings")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="JSON-lines of {id, sequence}")
    p.add_argument("--mode", choices=["bidirectional", "causal"], default="bidirectional")
    p.add_argument("--out", required=True, help="output JSON-lines file")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    for name in ("mlm_on", "mae_on", "text_pairs_on", "longform_pairs_on", "task_batching_on"):
        if getattr(args, name, None) is False:
            overrides[f"run.{name}"] = "false"
    return load_config(args.config, overrides)


def _run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    data_dir = Path(getattr(args, "data", None) or config.run.data_dir)
    out_root = Path(config.run.out_dir)
    if args.command == "gen-data":
        out = Path(args.out or config.run.data_dir)
        written = pipeline.gen_data(config, out)
        for name, path in written.items():
            print(f"{name}: {path}")
        return EXIT_OK
    if args.command == "cpt":
        res = pipeline.run_cpt(config, data_dir, args.out or out_root / "cpt")
        print(f"checkpoint: {res.checkpoint}\nmetrics: {res.metrics}")
        return EXIT_OK
    if args.command == "finetune":
        res = pipeline.run_finetune(config, data_dir, args.out or out_root / "finetune", args.init_from)
        print(f"checkpoint: {res.checkpoint}\nmetrics: {res.metrics}")
        return EXIT_OK
    if args.command == "eval":
        tasks = args.tasks or pipeline.find_tasks(data_dir)
        records = pipeline.run_eval(config, args.checkpoint, tasks, args.out or out_root / "eval", args.mode)
        for r in records:
            print(f"{r['task']:<10} P@1 {r['P@1']:.4f}  NDCG@5 {r['NDCG@5']:.4f}  n={r['n_queries']}")
        return EXIT_OK
    if args.command == "embed":
        errors = pipeline.run_embed(config, args.checkpoint, args.input, args.out, args.mode)
        for e in errors:
            print(e, file=sys.stderr)
        return EXIT_DATA if errors else EXIT_OK
    raise ConfigError(f"unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        where = f" (sequence {exc.sequence_id})" if exc.sequence_id else ""
        print(f"numeric failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, GenerationError, EvaluationError, MaskError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
