"""Data model and file I/O for tagging and span-classification datasets.

Datasets are lists of immutable examples plus a vocabulary. Tagging examples
carry per-token IOB tags; span-classification examples carry a set of target
spans and a single class label. Everything here is framework-free (numpy
only) and safe to share across threads once loaded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError

PAD_TOKEN = "[PAD]"
CLS_TOKEN = "[CLS]"
UNK_TOKEN = "[UNK]"

DEFAULT_TAG_LABELS = ("O", "B-AS", "I-AS", "B-OP", "I-OP")

# Label value used at CLS/PAD positions of a padded label matrix.
IGNORE_LABEL = -1


class TagVocab:
    """Ordered IOB tag vocabulary.

    Labels must be unique, contain "O", use the B-/I- prefix convention, and
    every B-X must come with a matching I-X.
    """

    def __init__(self, labels: Sequence[str] = DEFAULT_TAG_LABELS):
        labels = tuple(labels)
        if len(set(labels)) != len(labels):
            raise DataError(f"duplicate tag labels: {labels}")
        if "O" not in labels:
            raise DataError('tag vocabulary must contain "O"')
        for lab in labels:
            if lab != "O" and not (lab.startswith("B-") or lab.startswith("I-")):
                raise DataError(f"tag label {lab!r} is not O, B-X, or I-X")
        types = {lab[2:] for lab in labels if lab.startswith("B-")}
        for t in types:
            if f"I-{t}" not in labels:
                raise DataError(f"tag B-{t} has no matching I-{t}")
        self.labels = labels
        self._index = {lab: i for i, lab in enumerate(labels)}
        self.o_id = self._index["O"]

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, TagVocab) and self.labels == other.labels

    def index(self, label: str) -> int:
        if label not in self._index:
            raise DataError(f"unknown tag label {label!r}")
        return self._index[label]

    def label(self, idx: int) -> str:
        return self.labels[idx]

    def chunk_type(self, idx: int) -> Optional[str]:
        """Chunk type of a tag ("AS" for B-AS/I-AS), or None for O."""
        lab = self.labels[idx]
        return None if lab == "O" else lab[2:]

    def is_begin(self, idx: int) -> bool:
        return self.labels[idx].startswith("B-")

    def is_inside(self, idx: int) -> bool:
        return self.labels[idx].startswith("I-")

    def begin_id(self, chunk_type: str) -> int:
        return self.index(f"B-{chunk_type}")

    def inside_id(self, chunk_type: str) -> int:
        return self.index(f"I-{chunk_type}")


class LabelVocab:
    """Ordered class vocabulary for span classification (at least 2 classes)."""

    def __init__(self, classes: Sequence[str]):
        classes = tuple(classes)
        if len(set(classes)) != len(classes):
            raise DataError(f"duplicate class labels: {classes}")
        if len(classes) < 2:
            raise DataError("label vocabulary needs at least 2 classes")
        self.classes = classes
        self._index = {c: i for i, c in enumerate(classes)}

    def __len__(self) -> int:
        return len(self.classes)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelVocab) and self.classes == other.classes

    def index(self, cls: str) -> int:
        if cls not in self._index:
            raise DataError(f"unknown class label {cls!r}")
        return self._index[cls]

    def label(self, idx: int) -> str:
        return self.classes[idx]


@dataclass(frozen=True)
class TaggedSequence:
    """A tokenized sentence with one tag index per token."""

    tokens: tuple[str, ...]
    tags: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise DataError(
                f"{len(self.tokens)} tokens but {len(self.tags)} tags"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SpanExample:
    """A tokenized sentence, target spans (0-based inclusive), and a class."""

    tokens: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]
    label: int

    def __post_init__(self):
        check_spans(self.spans, len(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


Example = Union[TaggedSequence, SpanExample]


def check_spans(spans: Sequence[tuple[int, int]], n_tokens: int) -> None:
    """Validate span bounds and pairwise non-overlap; raises DataError."""
    for a, b in spans:
        if not (0 <= a <= b < n_tokens):
            raise DataError(f"span ({a},{b}) out of bounds for {n_tokens} tokens")
    ordered = sorted(spans)
    for (a1, b1), (a2, b2) in zip(ordered, ordered[1:]):
        if a2 <= b1:
            raise DataError(f"spans ({a1},{b1}) and ({a2},{b2}) overlap")


@dataclass(frozen=True)
class IobViolation:
    index: int
    reason: str


def validate_iob(tags: Sequence[int], vocab: TagVocab) -> Optional[IobViolation]:
    """Check the IOB chaining rule; None if valid, else the first violation.

    A tag I-X is valid only when immediately preceded by B-X or I-X of the
    same type. The empty sequence is valid.
    """
    prev_type: Optional[str] = None  # chunk type of the previous tag, None after O
    for i, t in enumerate(tags):
        ctype = vocab.chunk_type(t)
        if vocab.is_inside(t) and prev_type != ctype:
            return IobViolation(
                i, f"{vocab.label(t)} at {i} not preceded by B/I of the same type"
            )
        prev_type = ctype
    return None


class Chunk(NamedTuple):
    type: str
    start: int
    end: int  # inclusive


def extract_chunks(tags: Sequence[int], vocab: TagVocab) -> list[Chunk]:
    """Decode maximal B-X (I-X)* runs into typed inclusive index ranges."""
    violation = validate_iob(tags, vocab)
    if violation is not None:
        raise DataError(f"invalid IOB sequence: {violation.reason}")
    chunks: list[Chunk] = []
    start = None
    ctype = None
    for i, t in enumerate(tags):
        if vocab.is_begin(t):
            if start is not None:
                chunks.append(Chunk(ctype, start, i - 1))
            start, ctype = i, vocab.chunk_type(t)
        elif vocab.is_inside(t):
            pass  # continues the current chunk (validated above)
        else:
            if start is not None:
                chunks.append(Chunk(ctype, start, i - 1))
            start, ctype = None, None
    if start is not None:
        chunks.append(Chunk(ctype, start, len(tags) - 1))
    return chunks


def target_spans(example: Example, vocab: Optional[TagVocab] = None) -> list[tuple[int, int]]:
    """Target spans of an example: decoded chunks for tagging, P for span tasks."""
    if isinstance(example, SpanExample):
        return list(example.spans)
    if vocab is None:
        raise ConfigError("target_spans on a TaggedSequence requires a TagVocab")
    return [(c.start, c.end) for c in extract_chunks(example.tags, vocab)]


@dataclass
class TaggingDataset:
    examples: list[TaggedSequence]
    vocab: TagVocab

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class SpanClsDataset:
    examples: list[SpanExample]
    vocab: LabelVocab

    def __len__(self) -> int:
        return len(self.examples)


Dataset = Union[TaggingDataset, SpanClsDataset]


def _iter_jsonl(path: Union[str, Path]) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _require(obj: dict, key: str, path, lineno: int):
    if key not in obj:
        raise DataError(f"{path}:{lineno}: missing key {key!r}")
    return obj[key]


def load_tagging(path: Union[str, Path], vocab: Optional[TagVocab] = None) -> TaggingDataset:
    """Load a tagging JSONL file ({"tokens": [...], "tags": [...]}).

    With vocab=None the tag vocabulary is collected from the file (the
    default vocabulary is used when the file's tags fit in it; otherwise
    labels are ordered O first, then sorted B-X/I-X pairs).
    """
    records: list[tuple[int, list[str], list[str]]] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        tokens = _require(obj, "tokens", path, lineno)
        tags = _require(obj, "tags", path, lineno)
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise DataError(f"{path}:{lineno}: tokens must be a list of strings")
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise DataError(f"{path}:{lineno}: tags must be a list of strings")
        records.append((lineno, tokens, tags))
        seen.update(tags)

    if vocab is None:
        if seen <= set(DEFAULT_TAG_LABELS):
            vocab = TagVocab()
        else:
            types = sorted({t[2:] for t in seen if t != "O"})
            labels = ["O"]
            for ct in types:
                labels += [f"B-{ct}", f"I-{ct}"]
            vocab = TagVocab(labels)

    examples: list[TaggedSequence] = []
    for lineno, tokens, tags in records:
        try:
            ids = tuple(vocab.index(t) for t in tags)
            ex = TaggedSequence(tuple(tokens), ids)
            violation = validate_iob(ids, vocab)
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if violation is not None:
            raise DataError(f"{path}:{lineno}: invalid IOB: {violation.reason}")
        examples.append(ex)
    return TaggingDataset(examples, vocab)


def load_spancls(path: Union[str, Path], vocab: Optional[LabelVocab] = None) -> SpanClsDataset:
    """Load a span-classification JSONL file.

    Records look like {"tokens": [...], "spans": [[a,b],...], "label": "pos"}
    with 0-based inclusive spans. With vocab=None the class vocabulary is
    collected from the file in sorted order.
    """
    records: list[tuple[int, list[str], list, str]] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        tokens = _require(obj, "tokens", path, lineno)
        spans = _require(obj, "spans", path, lineno)
        label = _require(obj, "label", path, lineno)
        if not isinstance(label, str):
            raise DataError(f"{path}:{lineno}: label must be a string")
        records.append((lineno, tokens, spans, label))
        seen.add(label)

    if vocab is None:
        if len(seen) < 2:
            raise DataError(
                f"{path}: only {len(seen)} distinct class(es); supply a LabelVocab"
            )
        vocab = LabelVocab(sorted(seen))

    examples: list[SpanExample] = []
    for lineno, tokens, spans, label in records:
        try:
            span_tuples = tuple((int(a), int(b)) for a, b in spans)
            ex = SpanExample(tuple(tokens), span_tuples, vocab.index(label))
        except (DataError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        examples.append(ex)
    return SpanClsDataset(examples, vocab)


def save_tagging(dataset: TaggingDataset, path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            obj = {
                "tokens": list(ex.tokens),
                "tags": [dataset.vocab.label(t) for t in ex.tags],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def save_spancls(dataset: SpanClsDataset, path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            obj = {
                "tokens": list(ex.tokens),
                "spans": [list(s) for s in ex.spans],
                "label": dataset.vocab.label(ex.label),
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_unlabeled(path: Union[str, Path], task: str) -> list[Example]:
    """Load unlabeled JSONL: {"tokens": [...]} for tagging, plus "spans" for
    span tasks. Returned as examples with all-O tags / label 0 placeholders."""
    out: list[Example] = []
    for lineno, obj in _iter_jsonl(path):
        tokens = _require(obj, "tokens", path, lineno)
        if task == "tagging":
            out.append(TaggedSequence(tuple(tokens), tuple(0 for _ in tokens)))
        elif task == "spancls":
            spans = _require(obj, "spans", path, lineno)
            try:
                span_tuples = tuple((int(a), int(b)) for a, b in spans)
                out.append(SpanExample(tuple(tokens), span_tuples, 0))
            except (DataError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
        else:
            raise ConfigError(f"unknown task {task!r}")
    return out


class TokenVocab:
    """Token-to-id map with [PAD]=0, [CLS]=1, [UNK]=2 specials.

    Regular tokens are assigned ids in sorted order so the mapping is
    independent of corpus order.
    """

    SPECIALS = (PAD_TOKEN, CLS_TOKEN, UNK_TOKEN)

    def __init__(self, tokens: Iterable[str]):
        regular = sorted(set(tokens) - set(self.SPECIALS))
        self.tokens = self.SPECIALS + tuple(regular)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self._index[PAD_TOKEN]
        self.cls_id = self._index[CLS_TOKEN]
        self.unk_id = self._index[UNK_TOKEN]

    @classmethod
    def from_examples(cls, examples: Iterable[Example]) -> "TokenVocab":
        toks: list[str] = []
        for ex in examples:
            toks.extend(ex.tokens)
        return cls(toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass
class Batch:
    """A padded batch ready for the encoder.

    token_ids is (B, L) with [CLS] at position 0, then the real tokens, then
    [PAD]. attention_mask is 1.0 exactly on CLS and real tokens. For tagging,
    labels is a (B, L) tag-id matrix with IGNORE_LABEL at CLS/PAD; for span
    classification it is a (B,) class vector and span_mask marks in-span
    positions.
    """

    kind: str  # "tagging" | "spancls"
    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray
    span_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def pad_batch(
    examples: Sequence[Example],
    max_len: Optional[int],
    token_vocab: TokenVocab,
    *,
    cls_token: str = CLS_TOKEN,
    pad_token: str = PAD_TOKEN,
) -> Batch:
    """Pad a homogeneous list of examples into a Batch.

    A CLS token is always prepended, so every example must satisfy
    len(example) + 1 <= max_len; over-length input raises DataError rather
    than being truncated. max_len=None pads to the batch maximum.
    """
    if not examples:
        raise DataError("cannot pad an empty batch")
    kinds = {type(ex) for ex in examples}
    if len(kinds) != 1:
        raise DataError("mixed example types in one batch")
    kind = "tagging" if isinstance(examples[0], TaggedSequence) else "spancls"

    lengths = np.array([len(ex) for ex in examples], dtype=np.int64)
    needed = int(lengths.max()) + 1
    L = needed if max_len is None else int(max_len)
    over = [i for i, n in enumerate(lengths) if n + 1 > L]
    if over:
        raise DataError(
            f"example {over[0]} has {lengths[over[0]]} tokens; "
            f"{lengths[over[0]] + 1} with CLS exceeds max_len={L}"
        )

    B = len(examples)
    cls_id = token_vocab.id(cls_token)
    pad_id = token_vocab.id(pad_token)
    token_ids = np.full((B, L), pad_id, dtype=np.int64)
    attention_mask = np.zeros((B, L), dtype=np.float64)
    token_ids[:, 0] = cls_id
    attention_mask[:, 0] = 1.0

    if kind == "tagging":
        labels = np.full((B, L), IGNORE_LABEL, dtype=np.int64)
    else:
        labels = np.zeros(B, dtype=np.int64)
        span_mask = np.zeros((B, L), dtype=np.float64)

    for i, ex in enumerate(examples):
        n = len(ex)
        token_ids[i, 1 : n + 1] = [token_vocab.id(t) for t in ex.tokens]
        attention_mask[i, 1 : n + 1] = 1.0
        if kind == "tagging":
            labels[i, 1 : n + 1] = ex.tags
        else:
            labels[i] = ex.label
            for a, b in ex.spans:
                span_mask[i, a + 1 : b + 2] = 1.0

    return Batch(
        kind=kind,
        token_ids=token_ids,
        attention_mask=attention_mask,
        labels=labels,
        lengths=lengths,
        span_mask=span_mask if kind == "spancls" else None,
    )


def dev_split(dataset: Dataset, holdout: int) -> tuple[Dataset, Dataset]:
    """Split off the last `holdout` examples as a dev set."""
    n = len(dataset.examples)
    if not (0 < holdout < n):
        raise ConfigError(
            f"dev holdout {holdout} must be in (0, {n}) for this dataset"
        )
    head, tail = dataset.examples[:-holdout], dataset.examples[-holdout:]
    cls = type(dataset)
    return cls(head, dataset.vocab), cls(tail, dataset.vocab)
