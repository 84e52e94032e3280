"""Augmentation operators for tagging and span-classification examples.

Token-level operators (TR, INS, DEL, SW) touch only non-target tokens; the
span-level operator (SPR) replaces one target span with a span of the same
type drawn from the training data. Every application is recorded in an
alignment cell list so the original and augmented sequences can later be
padded into position-aligned pairs without re-inferring a diff.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import corpus
from .corpus import Example, SpanExample, TaggedSequence, TagVocab
from .errors import ConfigError, DataError
from .sampling import (
    RngStream,
    SimilarityIndex,
    SpanTable,
    TfidfTable,
    categorical_sample,
    importance_weights,
    similarity_weights,
    topk_similar,
)

TOKEN_KINDS = ("TR", "INS", "DEL", "SW")
SPAN_KINDS = ("SPR",)

# name -> (kind, pre-sampling, post-sampling)
_OPERATOR_TABLE = {
    "TR": ("TR", "uniform", "word-similarity"),
    "TR-IMP": ("TR", "importance", "word-similarity"),
    "INS": ("INS", "uniform", "word-similarity"),
    "DEL": ("DEL", "uniform", None),
    "DEL-IMP": ("DEL", "importance", None),
    "SW": ("SW", "uniform", "uniform"),
    "SPR": ("SPR", "uniform", "uniform"),
    "SPR-FREQ": ("SPR", "uniform", "frequency"),
    "SPR-SIM": ("SPR", "uniform", "similarity"),
}

OPERATOR_NAMES = tuple(_OPERATOR_TABLE)

# Resample budget when the polarity guard rejects a candidate token.
_GUARD_RESAMPLES = 10


@dataclass(frozen=True)
class OpSpec:
    """One of the nine supported operator configurations."""

    name: str
    kind: str
    pre_sampling: str
    post_sampling: Optional[str]
    polarity_guard: bool = False

    def __post_init__(self):
        if self.name not in _OPERATOR_TABLE:
            raise ConfigError(
                f"unknown operator {self.name!r}; choose from {OPERATOR_NAMES}"
            )
        expected = _OPERATOR_TABLE[self.name]
        if (self.kind, self.pre_sampling, self.post_sampling) != expected:
            raise ConfigError(
                f"operator {self.name!r} must be configured as {expected}, got "
                f"{(self.kind, self.pre_sampling, self.post_sampling)}"
            )

    @classmethod
    def by_name(cls, name: str, polarity_guard: bool = False) -> "OpSpec":
        if name not in _OPERATOR_TABLE:
            raise ConfigError(
                f"unknown operator {name!r}; choose from {OPERATOR_NAMES}"
            )
        kind, pre, post = _OPERATOR_TABLE[name]
        return cls(name, kind, pre, post, polarity_guard)

    @property
    def is_token_level(self) -> bool:
        return self.kind in TOKEN_KINDS


@dataclass
class AugmentTables:
    """Sampling resources shared by the operators."""

    tfidf: Optional[TfidfTable] = None
    word_index: Optional[SimilarityIndex] = None
    span_table: Optional[SpanTable] = None
    polarity_lexicon: frozenset = frozenset()


def read_polarity_lexicon(path: Union[str, Path]) -> frozenset:
    """Read a one-word-per-line lexicon of sentiment-bearing tokens."""
    words = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            word = line.strip()
            if word:
                words.add(word)
    return frozenset(words)


def num_applications(sentence_len: int) -> int:
    """How many times a token-level operator is applied to one sentence."""
    return max(1, sentence_len // 10)


@dataclass
class _Cell:
    """One alignment column linking an original position to its augmented fate.

    orig_pos is None for inserted tokens; aug_token is None where the
    original token has no surviving counterpart (deletions, span shrink).
    """

    orig_pos: Optional[int]
    orig_token: Optional[str]
    orig_tag: Optional[int]
    aug_token: Optional[str]
    aug_tag: Optional[int]
    span_id: Optional[int] = None  # span-classification target membership


@dataclass
class _AugState:
    kind: str  # "tagging" | "spancls"
    cells: list
    vocab: Optional[TagVocab]
    label: Optional[int]
    edits: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    changed: bool = False


def _init_state(example: Example, vocab: Optional[TagVocab]) -> _AugState:
    if isinstance(example, TaggedSequence):
        if vocab is None:
            raise ConfigError("augmenting a TaggedSequence requires a TagVocab")
        cells = [
            _Cell(i, tok, tag, tok, tag)
            for i, (tok, tag) in enumerate(zip(example.tokens, example.tags))
        ]
        return _AugState("tagging", cells, vocab, None)
    if isinstance(example, SpanExample):
        owner = {}
        for sid, (a, b) in enumerate(example.spans):
            for p in range(a, b + 1):
                owner[p] = sid
        cells = [
            _Cell(i, tok, None, tok, None, owner.get(i))
            for i, tok in enumerate(example.tokens)
        ]
        return _AugState("spancls", cells, None, example.label)
    raise ConfigError(f"unsupported example type {type(example).__name__}")


def _aug_cells(state: _AugState) -> list:
    """Indices into state.cells of the current augmented sequence, in order."""
    return [i for i, c in enumerate(state.cells) if c.aug_token is not None]


def _is_target(state: _AugState, cell: _Cell) -> bool:
    if state.kind == "tagging":
        return cell.aug_tag != state.vocab.o_id
    return cell.span_id is not None


def _current_tokens(state: _AugState) -> list:
    return [state.cells[i].aug_token for i in _aug_cells(state)]


def _pre_sample(
    state: _AugState,
    eligible: list,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
) -> int:
    """Pick one augmented-sequence position (index into `eligible`)."""
    if spec.pre_sampling == "uniform":
        return int(rng.integers(len(eligible)))
    if spec.pre_sampling == "importance":
        if tables.tfidf is None:
            raise ConfigError(f"operator {spec.name} needs a TF-IDF table")
        tokens = _current_tokens(state)
        weights = importance_weights(tokens, tables.tfidf)
        aug = _aug_cells(state)
        pos_of_cell = {ci: p for p, ci in enumerate(aug)}
        sub = np.array([weights[pos_of_cell[ci]] for ci in eligible])
        return categorical_sample(sub, rng)
    raise ConfigError(f"unknown pre-sampling strategy {spec.pre_sampling!r}")


def _post_sample_token(
    anchor: str,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    state: _AugState,
) -> Optional[str]:
    """Pick a replacement/insertion token similar to the anchor, or None."""
    if tables.word_index is None:
        raise ConfigError(f"operator {spec.name} needs a word similarity index")
    pairs = topk_similar(anchor, tables.word_index)
    if not pairs:
        return None
    weights = similarity_weights(pairs)
    attempts = 1 + (_GUARD_RESAMPLES if spec.polarity_guard else 0)
    for _ in range(attempts):
        cand = pairs[categorical_sample(weights, rng)][0]
        if not (spec.polarity_guard and cand in tables.polarity_lexicon):
            return cand
    state.flags.append("polarity-guard-exhausted")
    return None


def _apply_token_once(
    state: _AugState, spec: OpSpec, tables: AugmentTables, rng: RngStream
) -> bool:
    """One token-level application; returns False when it was a noop."""
    aug = _aug_cells(state)
    eligible = [ci for ci in aug if not _is_target(state, state.cells[ci])]
    if spec.kind in ("TR", "INS"):
        # The anchor must have similarity neighbors to post-sample from.
        idx = tables.word_index
        eligible = [ci for ci in eligible if idx is not None and state.cells[ci].aug_token in idx]
    needed = 2 if spec.kind == "SW" else 1
    if len(eligible) < needed:
        state.flags.append("no-eligible-position")
        return False

    pos_of_cell = {ci: p for p, ci in enumerate(aug)}

    if spec.kind == "TR":
        ci = eligible[_pre_sample(state, eligible, spec, tables, rng)]
        cell = state.cells[ci]
        cand = _post_sample_token(cell.aug_token, spec, tables, rng, state)
        if cand is None:
            return False
        state.edits.append(
            {"kind": "replace", "pos": pos_of_cell[ci], "old": cell.aug_token, "new": cand}
        )
        cell.aug_token = cand
        return True

    if spec.kind == "INS":
        ci = eligible[_pre_sample(state, eligible, spec, tables, rng)]
        cell = state.cells[ci]
        cand = _post_sample_token(cell.aug_token, spec, tables, rng, state)
        if cand is None:
            return False
        after = int(rng.integers(2)) == 1
        new_cell = _Cell(None, None, None, cand, state.vocab.o_id if state.kind == "tagging" else None)
        insert_at = ci + 1 if after else ci
        state.cells.insert(insert_at, new_cell)
        state.edits.append(
            {"kind": "insert", "pos": pos_of_cell[ci] + (1 if after else 0), "token": cand}
        )
        return True

    if spec.kind == "DEL":
        ci = eligible[_pre_sample(state, eligible, spec, tables, rng)]
        cell = state.cells[ci]
        state.edits.append({"kind": "delete", "pos": pos_of_cell[ci], "token": cell.aug_token})
        if cell.orig_pos is None:
            state.cells.pop(ci)  # deleting an inserted token leaves no column
        else:
            cell.aug_token = None
            cell.aug_tag = None
            cell.span_id = None
        if not any(
            not _is_target(state, state.cells[i]) for i in _aug_cells(state)
        ):
            state.flags.append("only-target-tokens-left")
        return True

    if spec.kind == "SW":
        i = _pre_sample(state, eligible, spec, tables, rng)
        ci = eligible[i]
        rest = eligible[:i] + eligible[i + 1 :]
        cj = rest[int(rng.integers(len(rest)))]
        a, b = state.cells[ci], state.cells[cj]
        state.edits.append(
            {"kind": "swap", "pos": sorted([pos_of_cell[ci], pos_of_cell[cj]])}
        )
        a.aug_token, b.aug_token = b.aug_token, a.aug_token
        return True

    raise ConfigError(f"not a token-level operator: {spec.name}")


def _current_spans(state: _AugState) -> list:
    """Target spans on the augmented side as (type, [cell indices])."""
    aug = _aug_cells(state)
    spans = []
    if state.kind == "tagging":
        run = []
        run_type = None
        for ci in aug:
            cell = state.cells[ci]
            if cell.aug_tag == state.vocab.o_id:
                if run:
                    spans.append((run_type, run))
                run, run_type = [], None
            elif state.vocab.is_begin(cell.aug_tag):
                if run:
                    spans.append((run_type, run))
                run, run_type = [ci], state.vocab.chunk_type(cell.aug_tag)
            else:
                run.append(ci)
        if run:
            spans.append((run_type, run))
    else:
        by_id: dict = {}
        for ci in aug:
            sid = state.cells[ci].span_id
            if sid is not None:
                by_id.setdefault(sid, []).append(ci)
        for sid in sorted(by_id):
            spans.append((str(state.label), by_id[sid]))
    return spans


def _apply_span_once(
    state: _AugState,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    span_type_of_cls: Optional[str],
) -> bool:
    spans = _current_spans(state)
    if not spans:
        state.flags.append("no-target-span")
        return False
    if tables.span_table is None:
        raise ConfigError(f"operator {spec.name} needs a span table")

    span_type, cell_ids = spans[int(rng.integers(len(spans)))]
    if state.kind == "spancls":
        span_type = span_type_of_cls
    entries = tables.span_table.spans_of(span_type)

    if spec.post_sampling == "uniform":
        weights = np.ones(len(entries))
    elif spec.post_sampling == "frequency":
        weights = np.array([e.freq for e in entries], dtype=np.float64)
    elif spec.post_sampling == "similarity":
        if not tables.span_table.has_vectors:
            raise ConfigError(
                f"operator {spec.name} needs pooled span encodings; build the "
                "span table with a pooled encoder"
            )
        orig_tokens = [state.cells[ci].aug_token for ci in cell_ids]
        q = tables.span_table.pooled(orig_tokens)
        qn = np.linalg.norm(q) or 1.0
        cos = []
        for e in entries:
            v = e.vector
            vn = np.linalg.norm(v) or 1.0
            cos.append(float(q @ v / (qn * vn)))
        weights = similarity_weights(list(zip([e.tokens for e in entries], cos)))
    else:
        raise ConfigError(f"unknown post-sampling strategy {spec.post_sampling!r}")

    new_tokens = list(entries[categorical_sample(weights, rng)].tokens)
    aug = _aug_cells(state)
    pos_of_cell = {ci: p for p, ci in enumerate(aug)}
    old_tokens = [state.cells[ci].aug_token for ci in cell_ids]
    state.edits.append(
        {
            "kind": "span_replace",
            "start": pos_of_cell[cell_ids[0]],
            "old": old_tokens,
            "new": list(new_tokens),
        }
    )

    sid = state.cells[cell_ids[0]].span_id
    m, m_new = len(cell_ids), len(new_tokens)
    if state.kind == "tagging":
        tag_of = lambda i: (
            state.vocab.begin_id(span_type) if i == 0 else state.vocab.inside_id(span_type)
        )
    else:
        tag_of = lambda i: None
    for i in range(min(m, m_new)):
        cell = state.cells[cell_ids[i]]
        cell.aug_token = new_tokens[i]
        cell.aug_tag = tag_of(i)
    if m_new < m:
        drop = []
        for i in range(m_new, m):
            cell = state.cells[cell_ids[i]]
            if cell.orig_pos is None:
                drop.append(cell_ids[i])
            else:
                cell.aug_token = None
                cell.aug_tag = None
                cell.span_id = None
        for ci in sorted(drop, reverse=True):
            state.cells.pop(ci)
    else:
        insert_after = cell_ids[m - 1]
        for i in range(m, m_new):
            new_cell = _Cell(None, None, None, new_tokens[i], tag_of(i), sid)
            insert_after += 1
            state.cells.insert(insert_after, new_cell)
    return True


def _materialize(state: _AugState) -> Example:
    aug = _aug_cells(state)
    tokens = tuple(state.cells[ci].aug_token for ci in aug)
    if state.kind == "tagging":
        tags = tuple(state.cells[ci].aug_tag for ci in aug)
        violation = corpus.validate_iob(tags, state.vocab)
        if violation is not None:
            raise DataError(f"augmentation produced invalid IOB: {violation.reason}")
        return TaggedSequence(tokens, tags)
    by_id: dict = {}
    for p, ci in enumerate(aug):
        sid = state.cells[ci].span_id
        if sid is not None:
            by_id.setdefault(sid, []).append(p)
    spans = tuple(sorted((min(ps), max(ps)) for ps in by_id.values()))
    return SpanExample(tokens, spans, state.label)


@dataclass
class AugmentedExample:
    """An augmentation result plus the alignment record that produced it."""

    source: Example
    example: Example
    op: str
    edits: list
    noop: bool
    flags: tuple
    cells: list  # alignment record; consumed by align()
    kind: str


def _finish(state: _AugState, source: Example, op: str) -> AugmentedExample:
    return AugmentedExample(
        source=source,
        example=_materialize(state),
        op=op,
        edits=list(state.edits),
        noop=not state.changed,
        flags=tuple(state.flags),
        cells=[replace(c) for c in state.cells],
        kind=state.kind,
    )


def _span_type_for_cls(example: Example, label_vocab) -> Optional[str]:
    if isinstance(example, SpanExample):
        if label_vocab is None:
            raise ConfigError("span operators on SpanExample need the LabelVocab")
        return label_vocab.label(example.label)
    return None


def apply_token_op(
    example: Example,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    vocab: Optional[TagVocab] = None,
) -> AugmentedExample:
    """Apply one token-level edit; target-span tokens are never touched."""
    if not spec.is_token_level:
        raise ConfigError(f"{spec.name} is not a token-level operator")
    state = _init_state(example, vocab)
    state.changed = _apply_token_once(state, spec, tables, rng)
    return _finish(state, example, spec.name)


def apply_span_op(
    example: Example,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    vocab: Optional[TagVocab] = None,
    label_vocab=None,
) -> AugmentedExample:
    """Replace one target span with a sampled span of the same type."""
    if spec.kind not in SPAN_KINDS:
        raise ConfigError(f"{spec.name} is not a span-level operator")
    state = _init_state(example, vocab)
    state.changed = _apply_span_once(
        state, spec, tables, rng, _span_type_for_cls(example, label_vocab)
    )
    return _finish(state, example, spec.name)


def augment_example(
    example: Example,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    vocab: Optional[TagVocab] = None,
    label_vocab=None,
) -> AugmentedExample:
    """Apply an operator with its per-sentence protocol.

    Token-level operators run max(1, len/10) times, re-deriving eligible
    positions after each edit; span-level operators run once when the
    example has a target span.
    """
    state = _init_state(example, vocab)
    if spec.is_token_level:
        for _ in range(num_applications(len(example))):
            if _apply_token_once(state, spec, tables, rng):
                state.changed = True
    else:
        state.changed = _apply_span_once(
            state, spec, tables, rng, _span_type_for_cls(example, label_vocab)
        )
    return _finish(state, example, spec.name)


@dataclass
class AlignedPair:
    """Original and augmented sequences padded to a common length.

    Where one side has no counterpart (deletion, insertion, span growth or
    shrink) the other side carries a pad column; mask_x/mask_aug are True on
    real tokens of each side. Tags use IGNORE_LABEL at pad columns. Both
    label structures agree at untouched positions by construction.
    """

    kind: str
    x_tokens: tuple
    aug_tokens: tuple
    mask_x: np.ndarray
    mask_aug: np.ndarray
    x_tags: Optional[tuple] = None
    aug_tags: Optional[tuple] = None
    label: Optional[int] = None
    x_span_cols: Optional[np.ndarray] = None
    aug_span_cols: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.x_tokens)

    def x_real(self) -> list:
        return [t for t, m in zip(self.x_tokens, self.mask_x) if m]

    def aug_real(self) -> list:
        return [t for t, m in zip(self.aug_tokens, self.mask_aug) if m]


def align(original: Example, augmented: AugmentedExample) -> AlignedPair:
    """Build the padded alignment of an example and its augmentation."""
    if augmented.cells is None:
        raise DataError("augmented example carries no edit record")
    if tuple(original.tokens) != tuple(augmented.source.tokens):
        raise DataError("augmented example was not produced from this original")

    cells = augmented.cells
    pad = corpus.PAD_TOKEN
    x_tokens = tuple(c.orig_token if c.orig_pos is not None else pad for c in cells)
    aug_tokens = tuple(c.aug_token if c.aug_token is not None else pad for c in cells)
    mask_x = np.array([c.orig_pos is not None for c in cells], dtype=bool)
    mask_aug = np.array([c.aug_token is not None for c in cells], dtype=bool)

    if augmented.kind == "tagging":
        x_tags = tuple(
            c.orig_tag if c.orig_pos is not None else corpus.IGNORE_LABEL for c in cells
        )
        aug_tags = tuple(
            c.aug_tag if c.aug_token is not None else corpus.IGNORE_LABEL for c in cells
        )
        return AlignedPair(
            kind="tagging",
            x_tokens=x_tokens,
            aug_tokens=aug_tokens,
            mask_x=mask_x,
            mask_aug=mask_aug,
            x_tags=x_tags,
            aug_tags=aug_tags,
        )

    orig_span_positions = set()
    for a, b in original.spans:
        orig_span_positions.update(range(a, b + 1))
    x_span_cols = np.array(
        [c.orig_pos is not None and c.orig_pos in orig_span_positions for c in cells],
        dtype=bool,
    )
    aug_span_cols = np.array(
        [c.aug_token is not None and c.span_id is not None for c in cells], dtype=bool
    )
    return AlignedPair(
        kind="spancls",
        x_tokens=x_tokens,
        aug_tokens=aug_tokens,
        mask_x=mask_x,
        mask_aug=mask_aug,
        label=augmented.source.label,
        x_span_cols=x_span_cols,
        aug_span_cols=aug_span_cols,
    )
