import numpy as np
import pytest
import torch

from mixspan.augment import AugmentTables
from mixspan.corpus import (
    SpanClsDataset,
    SpanExample,
    TaggedSequence,
    TaggingDataset,
    TagVocab,
    TokenVocab,
)
from mixspan.model import Model, ModelConfig, init_params
from mixspan.sampling import (
    RngStream,
    SimilarityIndex,
    build_span_table,
    build_tfidf,
    cooccurrence_embeddings,
)

torch.set_num_threads(1)

# The running example: a two-clause review sentence with two aspect and two
# opinion spans.
REVIEW_TOKENS = "Everybody was very nice , but the food was average at best .".split()
REVIEW_TAGS = "B-AS O B-OP I-OP O O O B-AS O B-OP I-OP I-OP O".split()

SHORT_TOKENS = "The food was average at best .".split()
SHORT_TAGS = "O B-AS O B-OP I-OP I-OP O".split()


@pytest.fixture(scope="session")
def vocab() -> TagVocab:
    return TagVocab()


@pytest.fixture(scope="session")
def review(vocab) -> TaggedSequence:
    return TaggedSequence(
        tuple(REVIEW_TOKENS), tuple(vocab.index(t) for t in REVIEW_TAGS)
    )


@pytest.fixture(scope="session")
def short_review(vocab) -> TaggedSequence:
    return TaggedSequence(
        tuple(SHORT_TOKENS), tuple(vocab.index(t) for t in SHORT_TAGS)
    )


def small_corpus(vocab) -> TaggingDataset:
    rows = [
        (SHORT_TOKENS, SHORT_TAGS),
        ("The service was great !".split(), "O B-AS O B-OP O".split()),
        ("pizza was very tasty .".split(), "B-AS O B-OP I-OP O".split()),
        ("the waiter seemed rude .".split(), "O B-AS O B-OP O".split()),
        ("i think the coffee was okay .".split(), "O O O B-AS O B-OP O".split()),
        ("battery life was great .".split(), "B-AS I-AS O B-OP O".split()),
    ]
    examples = [
        TaggedSequence(tuple(toks), tuple(vocab.index(t) for t in tags))
        for toks, tags in rows
    ]
    return TaggingDataset(examples, vocab)


@pytest.fixture(scope="session")
def tagging_corpus(vocab) -> TaggingDataset:
    return small_corpus(vocab)


@pytest.fixture(scope="session")
def tables(tagging_corpus) -> AugmentTables:
    sents = [list(ex.tokens) for ex in tagging_corpus.examples]
    return AugmentTables(
        tfidf=build_tfidf(sents),
        word_index=SimilarityIndex(cooccurrence_embeddings(sents)),
        span_table=build_span_table(tagging_corpus),
        polarity_lexicon=frozenset({"great", "rude", "tasty", "okay"}),
    )


@pytest.fixture(scope="session")
def token_vocab(tagging_corpus) -> TokenVocab:
    return TokenVocab.from_examples(tagging_corpus.examples)


def tiny_model(task: str, token_vocab, n_labels: int, seed: int = 7, **kw) -> Model:
    config = ModelConfig(
        task=task,
        vocab_size=len(token_vocab),
        n_labels=n_labels,
        d_model=kw.get("d_model", 16),
        n_layers=kw.get("n_layers", 1),
        d_ff=kw.get("d_ff", 32),
        max_len=kw.get("max_len", 24),
    )
    m = Model(config)
    init_params(m, RngStream(seed).child("init"))
    return m


@pytest.fixture()
def tagging_model(token_vocab, vocab) -> Model:
    return tiny_model("tagging", token_vocab, len(vocab))


def spancls_corpus() -> SpanClsDataset:
    from mixspan.corpus import LabelVocab

    label_vocab = LabelVocab(("negative", "positive"))
    rows = [
        ("The food was great .".split(), ((1, 1),), "positive"),
        ("the service was terrible .".split(), ((1, 1),), "negative"),
        ("pizza was tasty .".split(), ((0, 0),), "positive"),
        ("the waiter was rude .".split(), ((1, 1),), "negative"),
    ]
    examples = [
        SpanExample(tuple(toks), spans, label_vocab.index(lab))
        for toks, spans, lab in rows
    ]
    return SpanClsDataset(examples, label_vocab)


def random_valid_tags(rng: RngStream, vocab: TagVocab, max_len: int = 14) -> list:
    """A random valid IOB sequence (possibly empty)."""
    n = int(rng.integers(0, max_len + 1))
    types = sorted({vocab.chunk_type(i) for i in range(len(vocab)) if vocab.chunk_type(i)})
    tags = []
    i = 0
    while i < n:
        if rng.random() < 0.45 and types:
            ctype = types[int(rng.integers(len(types)))]
            run = min(1 + int(rng.integers(3)), n - i)
            tags.append(vocab.begin_id(ctype))
            tags.extend(vocab.inside_id(ctype) for _ in range(run - 1))
            i += run
        else:
            tags.append(vocab.o_id)
            i += 1
    return tags
