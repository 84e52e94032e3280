"""Command-line interface.

Subcommands: synth, tfidf, augment, train, evaluate, experiment. Train
flags mirror TrainConfig field names in kebab-case; --config points at a
JSON file with the same keys and explicit flags override file values.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .augment import (
    OPERATOR_NAMES,
    AugmentTables,
    OpSpec,
    augment_example,
    read_polarity_lexicon,
)
from .corpus import load_spancls, load_tagging
from .errors import ConfigError, DataError, NumericError
from .harness import (
    METHODS,
    TASKS,
    ExperimentPlan,
    TrainConfig,
    evaluate_checkpoint,
    run_experiment,
    train,
)
from .sampling import (
    RngStream,
    SimilarityIndex,
    build_span_table,
    build_tfidf,
    cooccurrence_embeddings,
    load_embeddings,
)
from .synth import SynthSpec, gen_synthetic

log = logging.getLogger(__name__)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field, defaulting to None so that values
    from --config files are only overridden when a flag is given."""
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        elif f.name in ("polarity_guard",):
            parser.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            parser.add_argument(flag, type=int, default=None)
        elif isinstance(f.default, float):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _train_config(args: argparse.Namespace) -> TrainConfig:
    values: dict = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
    for f in dataclasses.fields(TrainConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    return TrainConfig.from_dict(values)


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        task=args.task,
        n_labeled=args.n_labeled,
        n_unlabeled=args.n_unlabeled,
        n_dev=args.n_dev,
        n_test=args.n_test,
    )
    files = gen_synthetic(spec, RngStream(args.seed), args.out_dir)
    print(json.dumps({
        "train": str(files.train),
        "unlabeled": str(files.unlabeled),
        "dev": str(files.dev),
        "test": str(files.test),
        "lexicon": str(files.lexicon),
    }, indent=2))
    return 0


def _load_any(path: str, task: str):
    return load_tagging(path) if task == "tagging" else load_spancls(path)


def _cmd_tfidf(args) -> int:
    ds = _load_any(args.input, args.task)
    table = build_tfidf([list(ex.tokens) for ex in ds.examples])
    payload = {
        "doc_count": table.doc_count,
        "idf": table.idf,
        "doc_freq": table.doc_freq,
    }
    Path(args.output).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    print(f"wrote {len(table.idf)} token scores to {args.output}")
    return 0


def _cmd_augment(args) -> int:
    ds = _load_any(args.input, args.task)
    tag_vocab = ds.vocab if args.task == "tagging" else None
    label_vocab = ds.vocab if args.task == "spancls" else None
    spec = OpSpec.by_name(args.op, polarity_guard=args.polarity_guard or False)

    sentences = [list(ex.tokens) for ex in ds.examples]
    tables = AugmentTables()
    if args.polarity_lexicon:
        tables.polarity_lexicon = read_polarity_lexicon(args.polarity_lexicon)
    if spec.kind in ("TR", "INS", "DEL", "SW"):
        tables.tfidf = build_tfidf(sentences)
    if spec.kind in ("TR", "INS"):
        vectors = (
            load_embeddings(args.embeddings)
            if args.embeddings
            else cooccurrence_embeddings(sentences)
        )
        tables.word_index = SimilarityIndex(vectors)
    if spec.kind == "SPR":
        if spec.post_sampling == "similarity":
            raise ConfigError(
                "SPR-SIM needs pooled span encodings; augment via the training "
                "pipeline (method=mixda/mixmatch) instead of the offline CLI"
            )
        tables.span_table = build_span_table(ds)

    rng = RngStream(args.seed)
    with Path(args.output).open("w", encoding="utf-8") as fh:
        for i, ex in enumerate(ds.examples):
            aug = augment_example(
                ex, spec, tables, rng.child("augment", i),
                vocab=tag_vocab, label_vocab=label_vocab,
            )
            if args.task == "tagging":
                rec = {
                    "tokens": list(aug.example.tokens),
                    "tags": [ds.vocab.label(t) for t in aug.example.tags],
                }
            else:
                rec = {
                    "tokens": list(aug.example.tokens),
                    "spans": [list(s) for s in aug.example.spans],
                    "label": ds.vocab.label(aug.example.label),
                }
            rec["op"] = aug.op
            rec["edits"] = aug.edits
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"augmented {len(ds.examples)} examples with {args.op} -> {args.output}")
    return 0


def _cmd_train(args) -> int:
    config = _train_config(args)
    result = train(config)
    summary = {
        "best_epoch": result.best_epoch,
        "best_dev": result.best_dev,
        "test": result.test_metrics,
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(result.metrics_path),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_evaluate(args) -> int:
    metrics = evaluate_checkpoint(args.checkpoint, args.data)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def _parse_sizes(raw: str) -> list:
    sizes = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        sizes.append("full" if part == "full" else int(part))
    return sizes


def _cmd_experiment(args) -> int:
    config = _train_config(args)
    plan = ExperimentPlan(
        sizes=_parse_sizes(args.sizes),
        samples_per_size=args.samples_per_size,
        runs_per_sample=args.runs_per_sample,
        methods=[m.strip() for m in args.methods.split(",") if m.strip()],
    )
    result = run_experiment(plan, config, args.experiment_dir)
    print(f"wrote {result.runs_csv} and {result.summary_csv}")
    for (size, method), mean in sorted(result.means.items(), key=str):
        print(f"size={size} method={method} mean={mean:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixspan",
        description="Semi-supervised sequence tagging and span classification "
        "with augmentation-aware encoding interpolation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--task", choices=TASKS, default="tagging")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-labeled", type=int, default=100)
    p.add_argument("--n-unlabeled", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=100)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tfidf", help="build a TF-IDF table from a dataset")
    p.add_argument("--task", choices=TASKS, default="tagging")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_tfidf)

    p = sub.add_parser("augment", help="write an augmented copy of a dataset")
    p.add_argument("--task", choices=TASKS, default="tagging")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--op", choices=OPERATOR_NAMES, default="DEL")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--polarity-lexicon", default=None)
    p.add_argument("--polarity-guard", type=_parse_bool, default=None)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("experiment", help="run a label-budget experiment")
    _add_train_flags(p)
    p.add_argument("--experiment-dir", required=True)
    p.add_argument("--sizes", default="250,500,750,1000,full")
    p.add_argument("--samples-per-size", type=int, default=3)
    p.add_argument("--runs-per-sample", type=int, default=5)
    p.add_argument("--methods", default="baseline,mixda,mixmatch")
    p.set_defaults(func=_cmd_experiment)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
