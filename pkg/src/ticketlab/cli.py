"""Command-line entry point: ``ticketlab <command> [flags]``.

Settings are resolved as flags > ``--config`` JSON file > built-in defaults.
Outputs go to ``--output-dir``, else ``$TICKETLAB_OUTPUT``, else ``./ticketlab-out``.

Exit codes: 0 success, 2 usage or bad input file, 3 missing artifact,
4 numeric failure (non-finite loss or values).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io as tio
from . import report
from .autograd import NumericError
from .config import ExperimentConfig, config_hash, output_root
from .encoder import ConfigurationError, SubnetworkMask, init_params
from .experiments import run_experiment
from .pruning import magnitude_prune_loop, structured_prune_loop
from .tasks import TASK_NAMES, make_pretrain_corpus, make_task, make_task_suite
from .training import TrainingError, fine_tune, mlm_accuracy, pretrain_mlm, unigram_baseline

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("ticketlab")


class MissingArtifact(Exception):
    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = path


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(p)
    return p


# -- argument parsing ------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with experiment settings (overridden by flags)")
    p.add_argument("--output-dir", help="output root (default: $TICKETLAB_OUTPUT or ./ticketlab-out)")
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p):
    p.add_argument("--epochs", type=int, dest="train.epochs")
    p.add_argument("--learning-rate", type=float, dest="train.learning_rate")
    p.add_argument("--batch-size", type=int, dest="train.batch_size")


def _checkpoint_flag(p):
    p.add_argument("--checkpoint", help="checkpoint file (default: <output-dir>/checkpoint.bin)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ticketlab",
        description="Lottery-ticket experiments on a small transformer encoder.",
        epilog="Settings precedence: command-line flags > --config file > defaults.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-LM pretraining; writes checkpoint.bin")
    _common(p)
    p.add_argument("--steps", type=int, dest="pretrain.steps")
    p.add_argument("--pretrain-seed", type=int, dest="pretrain.seed")
    p.add_argument("--corpus-size", type=int, dest="pretrain.corpus_size")

    p = sub.add_parser("finetune", help="fine-tune one task, optionally under a mask")
    _common(p)
    _checkpoint_flag(p)
    _training_flags(p)
    p.add_argument("--task", required=True, choices=TASK_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", help="mask JSON file to apply")

    p = sub.add_parser("prune", help="find a good mask for one task and seed")
    _common(p)
    _checkpoint_flag(p)
    _training_flags(p)
    p.add_argument("--task", required=True, choices=TASK_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("m", "s"), default="s")
    p.add_argument("--threshold", type=float, help="fraction of the full dev metric to keep (default 0.9)")
    p.add_argument("--mode", choices=("heads_only", "mlps_only", "heads_and_mlps"))
    p.add_argument("--head-fraction", type=float)
    p.add_argument("--weight-fraction", type=float)
    p.add_argument("--basis", choices=("remaining", "original"))

    p = sub.add_parser("experiment", help="good/random/bad protocol over tasks and seeds")
    _common(p)
    _checkpoint_flag(p)
    _training_flags(p)
    p.add_argument("--tasks", nargs="+", choices=TASK_NAMES)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--method", choices=("m", "s", "both"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--mode", choices=("heads_only", "mlps_only", "heads_and_mlps"))
    p.add_argument("--workers", type=int)

    p = sub.add_parser("analyze", help="stability statistics, overlaps and attention patterns")
    _common(p)
    _checkpoint_flag(p)
    p.add_argument("--records", help="experiment directory (default: <output-dir>/experiment)")
    p.add_argument("--patterns", action="store_true", help="also classify attention patterns")

    p = sub.add_parser("report", help="CSV tables and SVG figures from stored records")
    _common(p)
    p.add_argument("--records", help="experiment directory (default: <output-dir>/experiment)")
    p.add_argument("--out", help="report directory (default: <records>/report)")
    return parser


_CONFIG_KEYS = {"threshold", "mode", "head_fraction", "weight_fraction", "basis", "tasks", "seeds",
                "method", "workers", "train.epochs", "train.learning_rate", "train.batch_size",
                "pretrain.steps", "pretrain.seed", "pretrain.corpus_size"}


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(_require(args.config)) if args.config else ExperimentConfig()
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None}
    if args.command == "prune" and "method" in overrides:
        overrides.pop("method")  # prune runs one method; experiment config is untouched
    return cfg.merged(overrides)


def _out(args, cfg: ExperimentConfig) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return output_root()


def _checkpoint_path(args, out: Path) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / "checkpoint.bin"


def _load_checkpoint(args, out):
    return tio.load_checkpoint(_require(_checkpoint_path(args, out)))


def _task(cfg, name):
    return make_task(name, cfg.suite_seed, cfg.train_size, cfg.dev_size)


# -- commands --------------------------------------------------------------------

def cmd_pretrain(args, cfg, out) -> int:
    corpus = make_pretrain_corpus(cfg.pretrain.seed, cfg.pretrain.corpus_size)
    held = make_pretrain_corpus(cfg.pretrain.seed + 1, cfg.pretrain.heldout_size)
    params = init_params(cfg.model, cfg.model.init_seed)
    ck = pretrain_mlm(params, corpus, cfg.model, cfg.pretrain)
    acc = mlm_accuracy(ck.params, cfg.model, held)
    base = unigram_baseline(corpus, held)
    ck.info.update(heldout_mlm_accuracy=acc, unigram_baseline=base)
    digest = tio.save_checkpoint(ck, _checkpoint_path(args, out))
    print(f"checkpoint {_checkpoint_path(args, out)} sha256={digest[:16]} "
          f"mlm_accuracy={acc:.4f} unigram_baseline={base:.4f}")
    return EXIT_OK


def cmd_finetune(args, cfg, out) -> int:
    ck = _load_checkpoint(args, out)
    task = _task(cfg, args.task)
    subnet, weights = None, None
    if args.mask:
        mask = tio.load_mask(_require(args.mask), ck.config)
        if isinstance(mask, SubnetworkMask):
            subnet = mask
        else:
            weights = mask
    _, metric = fine_tune(ck, task, cfg.train.with_seed(args.seed), subnet, weights)
    result = {"task": task.name, "seed": args.seed, "metric": task.metric, "dev_metric": metric,
              "mask": args.mask, "config_hash": config_hash(ck.config)}
    out.mkdir(parents=True, exist_ok=True)
    (out / f"finetune_{task.name}_seed{args.seed}.json").write_text(tio.dumps_json(result))
    print(f"{task.name} seed {args.seed}: dev {task.metric} = {metric:.4f}")
    return EXIT_OK


def cmd_prune(args, cfg, out) -> int:
    ck = _load_checkpoint(args, out)
    task = _task(cfg, args.task)
    if args.method == "s":
        mask, trace = structured_prune_loop(ck, task, args.seed, cfg.mode, train_config=cfg.train,
                                            threshold=cfg.threshold, head_fraction=cfg.head_fraction)
        size = f"heads={mask.num_heads} mlps={mask.num_mlps}"
    else:
        mask, trace = magnitude_prune_loop(ck, task, args.seed, train_config=cfg.train,
                                           threshold=cfg.threshold, fraction=cfg.weight_fraction,
                                           basis=cfg.basis)
        size = f"surviving_fraction={trace[-1].surviving_fraction:.4f}"
    stem = f"{task.name}_seed{args.seed}_{args.method}"
    tio.save_mask(mask, out / "masks" / f"{stem}.json", ck.config, task.name, args.seed)
    (out / "masks" / f"{stem}_trace.csv").write_text(trace.to_csv())
    print(f"{stem}: {size} trace_length={len(trace)} dev={trace[-1].dev_metric:.4f}")
    return EXIT_OK


def cmd_experiment(args, cfg, out) -> int:
    ck_path = _require(_checkpoint_path(args, out))
    ck = tio.load_checkpoint(ck_path)
    ck_hash = tio.file_sha256(ck_path)
    suite = make_task_suite(cfg.suite_seed, cfg.train_size, cfg.dev_size, cfg.tasks)
    result = run_experiment(ck, suite, cfg.settings(), workers=cfg.workers)
    store = tio.RecordStore(out / "experiment")
    for rec in result.records:
        store.put(rec, ck.config, ck_hash)
    for (task, seed, method), trace in sorted(result.traces.items()):
        store.put_trace(f"{task}__seed{seed}__{method}.csv", trace)
    store.write_json("config.json", cfg.to_dict())
    store.write_json("manifest.json", {"seeds": cfg.manifest(), "checkpoint_sha256": ck_hash,
                                       "config_hash": config_hash(ck.config),
                                       "records": store.keys()})
    print(f"{len(result.records)} records written to {store.root}")
    return EXIT_OK


def _records_dir(args, out) -> Path:
    return _require(Path(args.records) if args.records else out / "experiment")


def cmd_analyze(args, cfg, out) -> int:
    root = _records_dir(args, out)
    records = tio.RecordStore(root).load_all()
    written = report.write_analysis(records, root / "analysis")
    if args.patterns:
        ck = _load_checkpoint(args, out)
        tasks = sorted({r.task for r in records})
        suite = [_task(cfg, t) for t in tasks]
        (fh, fr), (ch, cr) = report.pattern_tables(ck, suite, records, cfg.train)
        (root / "analysis" / "patterns.csv").write_text(report.to_csv(fh, fr))
        (root / "analysis" / "survivor_correlation.csv").write_text(report.to_csv(ch, cr))
        written += [root / "analysis" / "patterns.csv", root / "analysis" / "survivor_correlation.csv"]
    for p in written:
        print(p)
    return EXIT_OK


def cmd_report(args, cfg, out) -> int:
    root = _records_dir(args, out)
    store = tio.RecordStore(root)
    records = store.load_all()
    config_path = root / "config.json"
    model_cfg = ExperimentConfig.load(config_path).model if config_path.exists() else cfg.model
    target = Path(args.out) if args.out else root / "report"
    for p in report.write_report(records, target, model_cfg):
        print(p)
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "prune": cmd_prune,
            "experiment": cmd_experiment, "analyze": cmd_analyze, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, _out(args, cfg))
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, TrainingError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (tio.FormatError, ConfigurationError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
