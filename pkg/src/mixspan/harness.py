"""Training loop, evaluation metrics, and the label-budget experiment runner.

Training runs a fixed number of epochs, evaluates on the dev split after
each, and keeps the checkpoint with the best dev metric (ties go to the
earliest epoch). Everything is driven by a single seed: two runs with the
same config produce identical metrics files.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from . import corpus as corpus_mod
from .augment import AugmentTables, OpSpec, augment_example, read_polarity_lexicon
from .corpus import (
    Batch,
    Dataset,
    Example,
    LabelVocab,
    SpanClsDataset,
    TaggedSequence,
    TaggingDataset,
    TagVocab,
    TokenVocab,
    dev_split,
    extract_chunks,
    load_spancls,
    load_tagging,
    load_unlabeled,
    pad_batch,
)
from .errors import ConfigError, DataError, NumericError
from .mixda import build_mixda_plan, mixda_loss
from .mixmatch import MixMatchConfig, mixmatch_step
from .model import (
    Model,
    ModelConfig,
    backward_and_step,
    cross_entropy,
    init_params,
    load_checkpoint,
    load_into_model,
    make_optimizer,
    make_pooled_fn,
    one_hot,
    save_checkpoint,
)
from .sampling import (
    RngStream,
    SimilarityIndex,
    build_span_table,
    build_tfidf,
    cooccurrence_embeddings,
    load_embeddings,
)

log = logging.getLogger(__name__)

TASKS = ("tagging", "spancls")
METHODS = ("baseline", "da", "mixda", "mixmatch")


@dataclass
class TrainConfig:
    """All knobs of a training run.

    The learning-rate default (5e-5) suits fine-tuning large pre-trained
    encoders; for the small from-scratch encoder here, 1e-3 is the
    recommended setting and what the experiment harness uses.
    """

    task: str = "tagging"
    method: str = "baseline"
    op: str = "DEL"
    polarity_guard: Optional[bool] = None  # None: on for spancls when a lexicon is given
    train_path: str = ""
    dev_path: Optional[str] = None
    test_path: Optional[str] = None
    unlabeled_path: Optional[str] = None
    embeddings_path: Optional[str] = None
    polarity_lexicon_path: Optional[str] = None
    out_dir: str = "runs"
    batch_size: int = 32
    max_len: int = 64
    learning_rate: float = 5e-5
    epochs: int = 20
    k: int = 2
    temperature: float = 0.5
    alpha_aug: float = 0.2
    alpha_mix: float = 0.2
    lambda_u: float = 0.1
    guess_warmup_epochs: int = 0
    mixda_favor_original: bool = True
    per_example_lambda: bool = True
    seed: int = 1
    dev_holdout: int = 150
    d_model: int = 64
    n_layers: int = 2
    d_ff: int = 128
    deterministic: bool = True
    metrics_name: str = "metrics.jsonl"
    checkpoint_name: str = "model.ckpt"

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.train_path:
            raise ConfigError("train_path is required")
        if self.method == "mixmatch" and not self.unlabeled_path:
            raise ConfigError("method=mixmatch requires unlabeled_path")
        for name in ("batch_size", "max_len", "epochs", "k", "d_model", "n_layers", "d_ff"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.temperature <= 1):
            raise ConfigError("temperature must be in (0, 1]")
        if self.alpha_aug <= 0 or self.alpha_mix <= 0:
            raise ConfigError("alpha_aug and alpha_mix must be positive")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")
        if self.guess_warmup_epochs < 0:
            raise ConfigError("guess_warmup_epochs must be >= 0")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    split: str
    metric: str
    value: float

    def as_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "split": self.split, "metric": self.metric,
             "value": self.value}
        )


def repair_iob(tags: Sequence[int], vocab: TagVocab) -> list:
    """Promote orphan I-X tags to B-X so any tag sequence decodes to chunks."""
    fixed = list(tags)
    prev_type = None
    for i, t in enumerate(fixed):
        ctype = vocab.chunk_type(t)
        if vocab.is_inside(t) and prev_type != ctype:
            fixed[i] = vocab.begin_id(ctype)
        prev_type = ctype
    return fixed


def _batches(examples: Sequence, size: int):
    for i in range(0, len(examples), size):
        yield examples[i : i + size]


def predict_tags(
    model: Model,
    examples: Sequence[TaggedSequence],
    token_vocab: TokenVocab,
    max_len: Optional[int],
    batch_size: int = 64,
) -> list:
    """Argmax tag sequences (repaired to valid IOB) for each example."""
    out = []
    vocab_size = model.config.n_labels
    with torch.no_grad():
        for chunk in _batches(list(examples), batch_size):
            batch = pad_batch(chunk, max_len, token_vocab)
            pred = model.predict(model.encode(batch)).numpy()
            for i, ex in enumerate(chunk):
                n = len(ex)
                ids = pred[i, 1 : n + 1].argmax(axis=-1).tolist()
                out.append(ids)
    return out


def score_chunks(gold_sets: Sequence[set], pred_sets: Sequence[set]) -> dict:
    """Exact-match chunk precision/recall/F1 from per-sentence chunk sets.

    Empty predictions define precision 0; F1 is 0 whenever P + R is.
    """
    n_correct = n_pred = n_gold = 0
    for gold, pred in zip(gold_sets, pred_sets):
        n_correct += len(set(gold) & set(pred))
        n_pred += len(pred)
        n_gold += len(gold)
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def score_classification(gold: Sequence[int], pred: Sequence[int], n_classes: int) -> dict:
    """Accuracy and macro-F1 with every vocabulary class in the average."""
    correct = sum(1 for p, g in zip(pred, gold) if p == g)
    accuracy = correct / len(gold) if gold else 0.0
    f1s = []
    for c in range(n_classes):
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return {"accuracy": accuracy, "macro_f1": float(np.mean(f1s)) if f1s else 0.0}


def evaluate_tagging(
    model: Model,
    dataset: TaggingDataset,
    token_vocab: TokenVocab,
    *,
    max_len: Optional[int] = None,
    batch_size: int = 64,
) -> dict:
    """Exact-chunk-match precision/recall/F1 over a dataset."""
    vocab = dataset.vocab
    preds = predict_tags(model, dataset.examples, token_vocab, max_len, batch_size)
    gold_sets = [set(extract_chunks(ex.tags, vocab)) for ex in dataset.examples]
    pred_sets = [set(extract_chunks(repair_iob(raw, vocab), vocab)) for raw in preds]
    return score_chunks(gold_sets, pred_sets)


def evaluate_spancls(
    model: Model,
    dataset: SpanClsDataset,
    token_vocab: TokenVocab,
    *,
    max_len: Optional[int] = None,
    batch_size: int = 64,
) -> dict:
    """Accuracy and macro-F1; every vocabulary class counts toward the mean,
    so classes absent from gold and predictions contribute an F1 of 0."""
    preds = []
    with torch.no_grad():
        for chunk in _batches(dataset.examples, batch_size):
            batch = pad_batch(chunk, max_len, token_vocab)
            pred = model.predict(model.encode(batch)).numpy()
            preds.extend(pred.argmax(axis=-1).tolist())
    gold = [ex.label for ex in dataset.examples]
    return score_classification(gold, preds, len(dataset.vocab))


def supervised_loss(
    model: Model,
    examples: Sequence[Example],
    token_vocab: TokenVocab,
    max_len: Optional[int],
) -> torch.Tensor:
    """Plain cross entropy on a batch (CLS/PAD positions masked out)."""
    batch = pad_batch(list(examples), max_len, token_vocab)
    pred = model.predict(model.encode(batch))
    n = model.config.n_labels
    if batch.kind == "tagging":
        target = torch.from_numpy(one_hot(batch.labels, n))
        mask = torch.from_numpy(batch.labels >= 0)
    else:
        target = torch.from_numpy(one_hot(batch.labels, n))
        mask = torch.ones(batch.size, dtype=torch.bool)
    return cross_entropy(pred, target, mask)


@dataclass
class TrainResult:
    best_epoch: int
    best_dev: dict
    history: list
    test_metrics: Optional[dict]
    checkpoint_path: Path
    metrics_path: Path
    model: Model
    token_vocab: TokenVocab


def _load_datasets(config: TrainConfig):
    if config.task == "tagging":
        train = load_tagging(config.train_path)
        if config.dev_path:
            dev = load_tagging(config.dev_path, train.vocab)
        else:
            train, dev = dev_split(train, config.dev_holdout)
        test = load_tagging(config.test_path, train.vocab) if config.test_path else None
    else:
        train = load_spancls(config.train_path)
        if config.dev_path:
            dev = load_spancls(config.dev_path, train.vocab)
        else:
            train, dev = dev_split(train, config.dev_holdout)
        test = load_spancls(config.test_path, train.vocab) if config.test_path else None
    unlabeled = (
        load_unlabeled(config.unlabeled_path, config.task)
        if config.unlabeled_path
        else []
    )
    return train, dev, test, unlabeled


def _build_tables(config: TrainConfig, train: Dataset, unlabeled: list, model: Model,
                  token_vocab: TokenVocab) -> AugmentTables:
    sentences = [list(ex.tokens) for ex in train.examples]
    sentences += [list(ex.tokens) for ex in unlabeled]
    spec = OpSpec.by_name(config.op)
    tables = AugmentTables()
    if config.polarity_lexicon_path:
        tables.polarity_lexicon = read_polarity_lexicon(config.polarity_lexicon_path)
    if spec.kind in ("TR", "INS", "DEL", "SW"):
        tables.tfidf = build_tfidf(sentences)
    if spec.kind in ("TR", "INS"):
        if config.embeddings_path:
            vectors = load_embeddings(config.embeddings_path)
        else:
            log.info("no embeddings file; using co-occurrence fallback vectors")
            vectors = cooccurrence_embeddings(sentences)
        tables.word_index = SimilarityIndex(vectors)
    if spec.kind == "SPR":
        pooled = make_pooled_fn(model, token_vocab) if spec.post_sampling == "similarity" else None
        tables.span_table = build_span_table(train, pooled)
    return tables


def _resolve_guard(config: TrainConfig) -> bool:
    if config.polarity_guard is not None:
        return config.polarity_guard
    return config.task == "spancls" and bool(config.polarity_lexicon_path)


def _primary_metric(task: str) -> str:
    return "f1" if task == "tagging" else "macro_f1"


def _evaluate(model, dataset, token_vocab, config) -> dict:
    if config.task == "tagging":
        return evaluate_tagging(model, dataset, token_vocab, max_len=config.max_len)
    return evaluate_spancls(model, dataset, token_vocab, max_len=config.max_len)


class _UnlabeledCycler:
    """Cycles unlabeled examples independently of labeled epochs."""

    def __init__(self, examples: list, rng: RngStream):
        self.examples = examples
        self.rng = rng
        self.cycle = 0
        self.pos = 0
        self.order = rng.child("u-order", 0).permutation(len(examples)) if examples else []

    def take(self, n: int) -> list:
        if not self.examples:
            return []
        out = []
        while len(out) < n:
            if self.pos >= len(self.order):
                self.cycle += 1
                self.order = self.rng.child("u-order", self.cycle).permutation(len(self.examples))
                self.pos = 0
            out.append(self.examples[int(self.order[self.pos])])
            self.pos += 1
        return out


def train(config: TrainConfig) -> TrainResult:
    """Run one training job and return the best checkpoint plus its history."""
    config.validate()
    if config.deterministic:
        torch.set_num_threads(1)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = RngStream(config.seed)

    train_ds, dev_ds, test_ds, unlabeled = _load_datasets(config)
    token_vocab = TokenVocab.from_examples(list(train_ds.examples) + list(unlabeled))
    n_labels = len(train_ds.vocab)
    tag_vocab = train_ds.vocab if config.task == "tagging" else None
    label_vocab = train_ds.vocab if config.task == "spancls" else None

    model_config = ModelConfig(
        task=config.task,
        vocab_size=len(token_vocab),
        n_labels=n_labels,
        d_model=config.d_model,
        n_layers=config.n_layers,
        d_ff=config.d_ff,
        max_len=config.max_len,
    )
    model = Model(model_config)
    init_params(model, master.child("init"))
    optimizer = make_optimizer(model, config.learning_rate)

    needs_tables = config.method in ("da", "mixda", "mixmatch")
    guard = _resolve_guard(config)
    op_spec = OpSpec.by_name(config.op, polarity_guard=guard) if needs_tables else None
    tables = (
        _build_tables(config, train_ds, unlabeled, model, token_vocab)
        if needs_tables
        else None
    )

    train_examples = list(train_ds.examples)
    if config.method == "da":
        da_rng = master.child("offline-augment")
        extra = [
            augment_example(ex, op_spec, tables, da_rng.child("augment", i),
                            vocab=tag_vocab, label_vocab=label_vocab).example
            for i, ex in enumerate(train_examples)
        ]
        train_examples = train_examples + extra

    mm_config = MixMatchConfig(
        batch_size=config.batch_size,
        k=config.k,
        temperature=config.temperature,
        alpha_aug=config.alpha_aug,
        alpha_mix=config.alpha_mix,
        lambda_u=config.lambda_u,
        favor_original=config.mixda_favor_original,
    )
    cycler = _UnlabeledCycler(list(unlabeled), master.child("unlabeled"))

    history: list[MetricsRecord] = []
    best_metric = -1.0
    best_epoch = -1
    best_dev: dict = {}
    best_state = None
    primary = _primary_metric(config.task)
    step_rng = master.child("steps")
    global_step = 0

    for epoch in range(config.epochs):
        order = master.child("shuffle-epoch", epoch).permutation(len(train_examples))
        epoch_losses = []
        epoch_loss_u = []
        for batch_idx in _batches(order.tolist(), config.batch_size):
            batch = [train_examples[i] for i in batch_idx]
            rng = step_rng.child("step", global_step)
            if config.method in ("baseline", "da"):
                loss = supervised_loss(model, batch, token_vocab, config.max_len)
            elif config.method == "mixda":
                plan = build_mixda_plan(
                    batch, op_spec, tables, rng,
                    token_vocab=token_vocab, n_labels=n_labels,
                    max_len=config.max_len, alpha=config.alpha_aug,
                    vocab=tag_vocab, label_vocab=label_vocab,
                    favor_original=config.mixda_favor_original,
                    per_example_lambda=config.per_example_lambda,
                )
                loss = mixda_loss(model, plan)
            else:  # mixmatch
                warm = epoch < config.guess_warmup_epochs
                u_batch = [] if warm else cycler.take(len(batch))
                loss, loss_x, loss_u, _ = mixmatch_step(
                    batch, u_batch, model, mm_config, op_spec, tables, rng,
                    token_vocab=token_vocab, max_len=config.max_len,
                    vocab=tag_vocab, label_vocab=label_vocab,
                )
                epoch_loss_u.append(float(loss_u.detach()))
            epoch_losses.append(backward_and_step(loss, model, optimizer))
            global_step += 1

        history.append(MetricsRecord(epoch, "train", "loss", float(np.mean(epoch_losses))))
        if epoch_loss_u:
            history.append(MetricsRecord(epoch, "train", "loss_u", float(np.mean(epoch_loss_u))))
        dev_metrics = _evaluate(model, dev_ds, token_vocab, config)
        for name, value in sorted(dev_metrics.items()):
            history.append(MetricsRecord(epoch, "dev", name, value))
        if dev_metrics[primary] > best_metric:
            best_metric = dev_metrics[primary]
            best_epoch = epoch
            best_dev = dev_metrics
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.info(
            "epoch %d: loss %.4f dev %s %.4f",
            epoch, float(np.mean(epoch_losses)), primary, dev_metrics[primary],
        )

    if best_state is not None:
        model.load_state_dict(best_state)

    config_echo = {
        "model": model_config.to_dict(),
        "task": config.task,
        "max_len": config.max_len,
        "token_vocab": list(token_vocab.tokens),
        "labels": list(train_ds.vocab.labels if config.task == "tagging" else train_ds.vocab.classes),
        "best_epoch": best_epoch,
        "seed": config.seed,
        "method": config.method,
    }
    checkpoint_path = out_dir / config.checkpoint_name
    save_checkpoint(checkpoint_path, model, config_echo)

    test_metrics = None
    if test_ds is not None:
        test_metrics = _evaluate(model, test_ds, token_vocab, config)
        for name, value in sorted(test_metrics.items()):
            history.append(MetricsRecord(best_epoch, "test", name, value))

    metrics_path = out_dir / config.metrics_name
    with metrics_path.open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.as_json() + "\n")

    return TrainResult(
        best_epoch=best_epoch,
        best_dev=best_dev,
        history=history,
        test_metrics=test_metrics,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        model=model,
        token_vocab=token_vocab,
    )


def load_model(checkpoint_path: Union[str, Path]):
    """Rebuild a model (and vocabularies) from a checkpoint file."""
    tensors, echo = load_checkpoint(checkpoint_path)
    model_config = ModelConfig(**echo["model"])
    model = Model(model_config)
    load_into_model(model, tensors)
    token_vocab = TokenVocab(echo["token_vocab"])
    if echo["task"] == "tagging":
        vocab = TagVocab(echo["labels"])
    else:
        vocab = LabelVocab(echo["labels"])
    return model, token_vocab, vocab, echo


def evaluate_checkpoint(
    checkpoint_path: Union[str, Path], data_path: Union[str, Path]
) -> dict:
    """Evaluate a saved checkpoint on a dataset file."""
    model, token_vocab, vocab, echo = load_model(checkpoint_path)
    if echo["task"] == "tagging":
        ds = load_tagging(data_path, vocab)
        return evaluate_tagging(model, ds, token_vocab, max_len=echo["max_len"])
    ds = load_spancls(data_path, vocab)
    return evaluate_spancls(model, ds, token_vocab, max_len=echo["max_len"])


@dataclass
class ExperimentPlan:
    """Label-budget sweep: sizes x (samples per size) x (runs per sample)."""

    sizes: list = field(default_factory=lambda: [250, 500, 750, 1000, "full"])
    samples_per_size: int = 3
    runs_per_sample: int = 5
    methods: list = field(default_factory=lambda: ["baseline", "mixda", "mixmatch"])

    def validate(self) -> None:
        if not self.sizes:
            raise ConfigError("experiment needs at least one size")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.samples_per_size <= 0 or self.runs_per_sample <= 0:
            raise ConfigError("samples_per_size and runs_per_sample must be positive")


@dataclass
class ExperimentResult:
    rows: list  # dicts: size, method, sample, seed, metric, value
    means: dict  # (size, method) -> mean metric
    runs_csv: Path
    summary_csv: Path


def run_experiment(
    plan: ExperimentPlan, base_config: TrainConfig, out_dir: Union[str, Path]
) -> ExperimentResult:
    """Train every (size, sample, method, run) combination and tabulate.

    Subsample composition depends only on (size, sample index) so every
    method sees identical data; run seeds are shared across methods for
    paired comparisons.
    """
    plan.validate()
    base_config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = RngStream(base_config.seed)

    if base_config.task == "tagging":
        full = load_tagging(base_config.train_path)
        save = corpus_mod.save_tagging
        make_ds = lambda ex: TaggingDataset(ex, full.vocab)
    else:
        full = load_spancls(base_config.train_path)
        save = corpus_mod.save_spancls
        make_ds = lambda ex: SpanClsDataset(ex, full.vocab)
    n = len(full.examples)

    metric_name = _primary_metric(base_config.task)
    rows = []
    for size in plan.sizes:
        want = n if size == "full" else int(size)
        if want > n:
            raise ConfigError(f"subset size {want} exceeds dataset size {n}")
        for sample in range(plan.samples_per_size):
            sub_rng = master.child(f"subsample:{size}", sample)
            idx = sub_rng.permutation(n)[:want]
            subset = make_ds([full.examples[int(i)] for i in idx])
            subset_path = out_dir / f"subset_{size}_{sample}.jsonl"
            save(subset, subset_path)
            for run in range(plan.runs_per_sample):
                run_seed = int(master.child(f"run-seed:{size}:{sample}", run).integers(1, 2**31))
                for method in plan.methods:
                    cfg = replace(
                        base_config,
                        method=method,
                        train_path=str(subset_path),
                        seed=run_seed,
                        out_dir=str(out_dir / f"run_{size}_{sample}_{run}_{method}"),
                    )
                    result = train(cfg)
                    if result.test_metrics is None:
                        raise ConfigError("run_experiment requires test_path in the base config")
                    rows.append(
                        {
                            "size": size,
                            "method": method,
                            "sample": sample,
                            "seed": run_seed,
                            "metric": metric_name,
                            "value": result.test_metrics[metric_name],
                        }
                    )

    means = {}
    for size in plan.sizes:
        for method in plan.methods:
            vals = [r["value"] for r in rows if r["size"] == size and r["method"] == method]
            means[(size, method)] = float(np.mean(vals))

    runs_csv = out_dir / "runs.csv"
    with runs_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["size", "method", "sample", "seed", "metric", "value"])
        writer.writeheader()
        writer.writerows(rows)
    summary_csv = out_dir / "summary.csv"
    with summary_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "method", "metric", "mean"])
        for (size, method), mean in means.items():
            writer.writerow([size, method, metric_name, mean])

    return ExperimentResult(rows, means, runs_csv, summary_csv)
