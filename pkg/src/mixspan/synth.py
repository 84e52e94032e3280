"""Synthetic review-style corpora for desk-scale experiments.

Sentences are built from templates over a ~50-token vocabulary; the tags
fall out of the construction, so the generator doubles as its own oracle.
Aspect words only ever occur inside aspect spans and opinion words inside
opinion spans, except for a small set of ambiguous tokens whose role depends
on the slot they fill; those make the tagging task require context instead
of token identity alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .corpus import DEFAULT_TAG_LABELS, TagVocab
from .errors import ConfigError
from .sampling import RngStream, categorical_sample

ASPECT_HEADS = (
    "battery", "screen", "keyboard", "service", "pizza",
    "pasta", "waiter", "room", "coffee", "salad",
)
# Two-token aspects: the first word never occurs outside an aspect span and
# the second word only ever occurs as its continuation.
ASPECT_PAIRS = (("battery", "life"), ("sound", "quality"), ("front", "desk"))
POSITIVE_WORDS = ("great", "excellent", "tasty", "friendly", "clean", "fast")
NEGATIVE_WORDS = ("terrible", "slow", "rude", "dirty", "bland", "noisy")
NEUTRAL_WORDS = ("okay", "average", "fine")
INTENSIFIERS = ("very", "quite", "really")
# Aspect nouns in a noun slot, opinion adjectives in an adjective slot.
AMBIGUOUS = ("light", "cool", "fair")
DISTRACTORS = ("hotel", "laptop", "place", "menu")
FILLERS = (
    "the", "a", "this", "was", "is", "were", "seemed", "but",
    "and", "though", "i", "think", "overall", ",", ".", "!",
)

POLARITY_NAMES = ("positive", "negative", "neutral")
_POLARITY_WORDS = {
    "positive": POSITIVE_WORDS,
    "negative": NEGATIVE_WORDS,
    "neutral": NEUTRAL_WORDS,
}


@dataclass
class SynthSpec:
    task: str = "tagging"
    n_labeled: int = 100
    n_unlabeled: int = 2000
    n_dev: int = 100
    n_test: int = 500
    polarity_priors: tuple = (0.4, 0.4, 0.2)
    ambiguous_rate: float = 0.15

    def __post_init__(self):
        if self.task not in ("tagging", "spancls"):
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.polarity_priors) != len(POLARITY_NAMES):
            raise ConfigError("polarity_priors must have 3 entries (pos, neg, neutral)")
        if abs(sum(self.polarity_priors) - 1.0) > 1e-9:
            raise ConfigError("polarity_priors must sum to 1")
        if not (0.0 <= self.ambiguous_rate <= 1.0):
            raise ConfigError("ambiguous_rate must be in [0, 1]")
        for name in ("n_labeled", "n_unlabeled", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class Clause:
    aspect: Optional[tuple[int, int]]  # inclusive token positions
    opinion: Optional[tuple[int, int]]
    polarity: Optional[str]


@dataclass
class SynthSentence:
    tokens: list
    tags: list  # tag label strings
    clauses: list


def vocabulary() -> list:
    """The full generator vocabulary (deduplicated, sorted)."""
    toks = set(ASPECT_HEADS) | set(POSITIVE_WORDS) | set(NEGATIVE_WORDS)
    toks |= set(NEUTRAL_WORDS) | set(INTENSIFIERS) | set(AMBIGUOUS)
    toks |= set(DISTRACTORS) | set(FILLERS)
    for a, b in ASPECT_PAIRS:
        toks |= {a, b}
    return sorted(toks)


def _zipf_weights(n: int) -> list:
    return [1.0 / (i + 1) for i in range(n)]


def _draw_polarity(priors, rng: RngStream) -> str:
    return POLARITY_NAMES[categorical_sample(list(priors), rng)]


def _draw_aspect(rng: RngStream, allow_ambiguous: bool) -> list:
    # Zipf-weighted heads give a long tail that 100 labeled examples rarely cover.
    choices = list(ASPECT_HEADS) + [list(p) for p in ASPECT_PAIRS]
    if allow_ambiguous:
        choices += list(AMBIGUOUS)
    idx = categorical_sample(_zipf_weights(len(choices)), rng)
    picked = choices[idx]
    return [picked] if isinstance(picked, str) else list(picked)


def _draw_opinion(polarity: str, rng: RngStream, allow_ambiguous: bool) -> list:
    words = list(_POLARITY_WORDS[polarity])
    if allow_ambiguous and polarity == "neutral":
        words += list(AMBIGUOUS)
    word = words[int(rng.integers(len(words)))]
    span = [word]
    if rng.random() < 0.4:
        span.insert(0, INTENSIFIERS[int(rng.integers(len(INTENSIFIERS)))])
    return span


def _emit_clause(
    out: SynthSentence, rng: RngStream, priors, ambiguous_rate: float,
    with_aspect: bool = True,
) -> None:
    use_amb = rng.random() < ambiguous_rate
    polarity = _draw_polarity(priors, rng)
    verb = ("was", "is", "seemed")[int(rng.integers(3))]

    out.tokens.append("the")
    out.tags.append("O")
    aspect_span = None
    if with_aspect:
        aspect = _draw_aspect(rng, use_amb)
        start = len(out.tokens)
        out.tokens.extend(aspect)
        out.tags.extend(["B-AS"] + ["I-AS"] * (len(aspect) - 1))
        aspect_span = (start, start + len(aspect) - 1)
    else:
        out.tokens.append(DISTRACTORS[int(rng.integers(len(DISTRACTORS)))])
        out.tags.append("O")
    out.tokens.append(verb)
    out.tags.append("O")
    opinion = _draw_opinion(polarity, rng, use_amb)
    ostart = len(out.tokens)
    out.tokens.extend(opinion)
    out.tags.extend(["B-OP"] + ["I-OP"] * (len(opinion) - 1))
    out.clauses.append(Clause(aspect_span, (ostart, ostart + len(opinion) - 1), polarity))


def make_sentence(rng: RngStream, spec: SynthSpec, need_aspect: bool = False) -> SynthSentence:
    """Generate one sentence; tags are correct by construction."""
    out = SynthSentence([], [], [])
    if rng.random() < 0.3:
        out.tokens.extend(["i", "think"])
        out.tags.extend(["O", "O"])
    first_has_aspect = need_aspect or rng.random() < 0.85
    _emit_clause(out, rng, spec.polarity_priors, spec.ambiguous_rate, first_has_aspect)
    if rng.random() < 0.35:
        out.tokens.extend([",", "but"])
        out.tags.extend(["O", "O"])
        _emit_clause(out, rng, spec.polarity_priors, spec.ambiguous_rate, rng.random() < 0.85)
    out.tokens.append("." if rng.random() < 0.8 else "!")
    out.tags.append("O")
    return out


def _spancls_record(sent: SynthSentence) -> Optional[dict]:
    for clause in sent.clauses:
        if clause.aspect is not None and clause.opinion is not None:
            return {
                "tokens": sent.tokens,
                "spans": [list(clause.aspect)],
                "label": clause.polarity,
            }
    return None


def _gen_records(n: int, spec: SynthSpec, rng: RngStream, purpose: str) -> list:
    records = []
    i = 0
    while len(records) < n:
        sent = make_sentence(rng.child(purpose, i), spec, need_aspect=spec.task == "spancls")
        i += 1
        if spec.task == "tagging":
            records.append({"tokens": sent.tokens, "tags": sent.tags})
        else:
            rec = _spancls_record(sent)
            if rec is not None:
                records.append(rec)
    return records


@dataclass
class SynthFiles:
    train: Path
    unlabeled: Path
    dev: Path
    test: Path
    lexicon: Path
    spec: SynthSpec


def gen_synthetic(spec: SynthSpec, rng: RngStream, out_dir: Union[str, Path]) -> SynthFiles:
    """Write train/unlabeled/dev/test JSONL files plus a polarity lexicon.

    The same seed always produces byte-identical files. Unlabeled records
    drop their labels: tokens only for tagging, tokens plus oracle spans for
    span classification.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(name: str, records: list) -> Path:
        path = out_dir / name
        with path.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        return path

    train = write("train.jsonl", _gen_records(spec.n_labeled, spec, rng, "train"))
    dev = write("dev.jsonl", _gen_records(spec.n_dev, spec, rng, "dev"))
    test = write("test.jsonl", _gen_records(spec.n_test, spec, rng, "test"))

    unlabeled_records = []
    for rec in _gen_records(spec.n_unlabeled, spec, rng, "unlabeled"):
        if spec.task == "tagging":
            unlabeled_records.append({"tokens": rec["tokens"]})
        else:
            unlabeled_records.append({"tokens": rec["tokens"], "spans": rec["spans"]})
    unlabeled = write("unlabeled.jsonl", unlabeled_records)

    lexicon = out_dir / "polarity_lexicon.txt"
    words = sorted(set(POSITIVE_WORDS) | set(NEGATIVE_WORDS) | set(NEUTRAL_WORDS))
    lexicon.write_text("\n".join(words) + "\n", encoding="utf-8")

    return SynthFiles(train, unlabeled, dev, test, lexicon, spec)
