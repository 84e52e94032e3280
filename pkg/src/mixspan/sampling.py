"""Randomness and scoring: seeded RNG streams, Beta/categorical samplers,
TF-IDF importance tables, embedding similarity, span frequency tables.

All stochastic behavior in the package flows through RngStream so that a
single master seed reproduces every augmentation, interpolation draw, and
shuffle, independent of evaluation order across worker threads.
"""
from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


def _purpose_key(purpose: str) -> int:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class RngStream:
    """A splittable deterministic random stream (PCG64).

    Child streams are derived from (seed, purpose tag, index), so sibling
    streams are statistically independent and their draws do not depend on
    how much any other stream has consumed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = _key
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))
        self.draws = 0

    def child(self, purpose: str, index: Optional[int] = None) -> "RngStream":
        key = self.key + (_purpose_key(purpose), 0 if index is None else int(index) + 1)
        return RngStream(self.seed, key)

    def random(self, size=None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self._gen.random(size)

    def standard_normal(self, size=None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)


def _gamma_core(alpha: float, rng: RngStream, n: int) -> np.ndarray:
    """Marsaglia-Tsang squeeze sampler for Gamma(alpha, 1), alpha >= 1."""
    d = alpha - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n, dtype=np.float64)
    need = np.ones(n, dtype=bool)
    while need.any():
        m = int(need.sum())
        x = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        x2 = x * x
        squeeze = ok & (u < 1.0 - 0.0331 * x2 * x2)
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.where(ok, np.log(np.where(ok, v, 1.0)), 0.0)
            full = ok & ~squeeze & (np.log(u) < 0.5 * x2 + d * (1.0 - v + logv))
        accept = squeeze | full
        idx = np.flatnonzero(need)[accept]
        out[idx] = d * v[accept]
        need[idx] = False
    return out


def _gamma(alpha: float, rng: RngStream, n: int) -> np.ndarray:
    """Gamma(alpha, 1) for any alpha > 0 (boosted below 1)."""
    if alpha >= 1.0:
        return _gamma_core(alpha, rng, n)
    g = _gamma_core(alpha + 1.0, rng, n)
    u = rng.random(n)
    return g * u ** (1.0 / alpha)


def beta_sample(alpha: float, rng: RngStream, size: Optional[int] = None):
    """Draw from the symmetric Beta(alpha, alpha) distribution.

    Computed as g1 / (g1 + g2) from two independent Gamma(alpha, 1) draws,
    which stays accurate for small alpha where the density is bimodal.
    """
    if not (alpha > 0) or not math.isfinite(alpha):
        raise ConfigError(f"beta_sample needs alpha > 0, got {alpha}")
    n = 1 if size is None else int(size)
    g1 = _gamma(alpha, rng, n)
    g2 = _gamma(alpha, rng, n)
    total = g1 + g2
    # Underflow guard for very small alpha: the limit distribution puts all
    # mass on {0, 1}, so split degenerate draws with a fair coin.
    zero = total == 0
    if zero.any():
        coin = (rng.random(int(zero.sum())) < 0.5).astype(np.float64)
        g1 = g1.copy()
        g1[zero] = coin
        total = total.copy()
        total[zero] = 1.0
    lam = g1 / total
    return float(lam[0]) if size is None else lam


def categorical_sample(weights: Sequence[float], rng: RngStream) -> int:
    """Sample an index with probability proportional to the given weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ConfigError("categorical_sample needs a nonempty weight vector")
    if (w < 0).any():
        raise ConfigError("categorical_sample weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ConfigError("categorical_sample weights sum to zero")
    cdf = np.cumsum(w)
    u = rng.random() * total
    return int(min(np.searchsorted(cdf, u, side="right"), w.size - 1))


class TfidfTable:
    """Per-token TF-IDF scores over a sentence corpus.

    idf(t) = ln(N / df(t)) with no smoothing; the score of token t inside a
    sentence s is count(t, s) * idf(t). The table also exposes a corpus-level
    score per token (mean of its occurrence scores).
    """

    def __init__(self, idf: dict[str, float], doc_freq: dict[str, int], doc_count: int,
                 mean_score: dict[str, float]):
        self.idf = idf
        self.doc_freq = doc_freq
        self.doc_count = doc_count
        self._mean_score = mean_score
        self.degenerate = bool(idf) and all(v == 0.0 for v in idf.values())

    def __contains__(self, token: str) -> bool:
        return token in self.idf

    def score(self, token: str) -> float:
        if token not in self._mean_score:
            raise KeyError(f"token {token!r} not in TF-IDF table")
        return self._mean_score[token]

    def sentence_scores(self, tokens: Sequence[str]) -> np.ndarray:
        counts = Counter(tokens)
        scores = np.empty(len(tokens), dtype=np.float64)
        for i, t in enumerate(tokens):
            if t not in self.idf:
                raise KeyError(f"token {t!r} not in TF-IDF table")
            scores[i] = counts[t] * self.idf[t]
        return scores


def build_tfidf(corpus: Sequence[Sequence[str]]) -> TfidfTable:
    """Build a TfidfTable from a corpus of tokenized sentences."""
    if not corpus:
        raise DataError("cannot build a TF-IDF table from an empty corpus")
    n_docs = len(corpus)
    df: Counter[str] = Counter()
    occ_total: Counter[str] = Counter()
    occ_score: dict[str, float] = {}
    for sent in corpus:
        df.update(set(sent))
    idf = {t: math.log(n_docs / d) for t, d in df.items()}
    for sent in corpus:
        counts = Counter(sent)
        for t, c in counts.items():
            occ_total[t] += c
            occ_score[t] = occ_score.get(t, 0.0) + c * (c * idf[t])
    mean_score = {t: occ_score[t] / occ_total[t] for t in occ_total}
    table = TfidfTable(idf, dict(df), n_docs, mean_score)
    if table.degenerate:
        log.warning(
            "TF-IDF table is degenerate (all idf = 0, e.g. single-document "
            "corpus); importance sampling will be uniform"
        )
    return table


_IMPORTANCE_EPS = 1e-3


def weights_from_scores(scores: np.ndarray) -> np.ndarray:
    """Turn importance scores into sampling weights that favor LOW scores.

    w_i = (max_j s_j - s_i) + eps * (max_j s_j + 1), strictly positive and
    monotone decreasing in s_i; equal scores give uniform weights.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ConfigError("cannot build weights from an empty score vector")
    m = scores.max()
    return (m - scores) + _IMPORTANCE_EPS * (m + 1.0)


def importance_weights(tokens: Sequence[str], table: TfidfTable) -> np.ndarray:
    """Sampling weights over a sentence's positions favoring low TF-IDF."""
    return weights_from_scores(table.sentence_scores(tokens))


def load_embeddings(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Read a text embedding file: header "V d", then "<token> f1 ... fd"."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}:1: expected header 'V d'")
        try:
            n, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise DataError(f"{path}:1: expected integer header 'V d'") from exc
        vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise DataError(
                    f"{path}:{lineno}: expected 1 token + {dim} floats, got {len(parts)} fields"
                )
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad float") from exc
            vectors[parts[0]] = vec
    if len(vectors) != n:
        raise DataError(f"{path}: header claims {n} vectors, found {len(vectors)}")
    return vectors


def save_embeddings(vectors: dict[str, np.ndarray], path: Union[str, Path]) -> None:
    path = Path(path)
    dim = len(next(iter(vectors.values()))) if vectors else 0
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{len(vectors)} {dim}\n")
        for tok, vec in vectors.items():
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def cooccurrence_embeddings(
    corpus: Sequence[Sequence[str]], window: int = 2
) -> dict[str, np.ndarray]:
    """Deterministic fallback token vectors from windowed co-occurrence counts.

    Each token's vector is its L2-normalized co-occurrence count row over the
    corpus vocabulary. No training involved; adequate for picking distribution-
    ally similar tokens in the synthetic harness.
    """
    vocab = sorted({t for sent in corpus for t in sent})
    index = {t: i for i, t in enumerate(vocab)}
    mat = np.zeros((len(vocab), len(vocab)), dtype=np.float64)
    for sent in corpus:
        ids = [index[t] for t in sent]
        for i, ti in enumerate(ids):
            lo = max(0, i - window)
            hi = min(len(ids), i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    mat[ti, ids[j]] += 1.0
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    mat /= norms
    return {t: mat[i] for t, i in index.items()}


class SimilarityIndex:
    """Exhaustive top-K cosine neighborhoods over a fixed embedding vocabulary.

    Neighbor lists exclude the query item, are sorted by descending cosine
    (ties broken by vocabulary order), and are computed lazily per item.
    """

    K = 10

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise DataError("cannot build a similarity index from no vectors")
        self.vocab = sorted(vectors)
        dims = {len(vectors[t]) for t in self.vocab}
        if len(dims) != 1:
            raise DataError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self._index = {t: i for i, t in enumerate(self.vocab)}
        mat = np.stack([np.asarray(vectors[t], dtype=np.float64) for t in self.vocab])
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        self._mat = mat / norms
        self._cache: dict[str, list[tuple[str, float]]] = {}

    def __contains__(self, item: str) -> bool:
        return item in self._index

    def neighbors(self, item: str) -> list[tuple[str, float]]:
        if item not in self._index:
            raise KeyError(f"item {item!r} not in similarity index")
        if item in self._cache:
            return self._cache[item]
        i = self._index[item]
        sims = self._mat @ self._mat[i]
        sims[i] = -np.inf  # never the item's own neighbor
        k = min(self.K, len(self.vocab) - 1)
        order = np.lexsort((np.arange(len(sims)), -sims))[:k]
        result = [(self.vocab[j], float(sims[j])) for j in order]
        self._cache[item] = result
        return result


def topk_similar(item: str, index: SimilarityIndex) -> list[tuple[str, float]]:
    """Up to K (candidate, cosine) pairs, most similar first, self excluded."""
    return index.neighbors(item)


def similarity_weights(pairs: Sequence[tuple[str, float]]) -> np.ndarray:
    """Sampling weights from cosines, clamped at zero for negative similarity.

    When every cosine clamps to zero the weights fall back to uniform so the
    candidate set stays usable.
    """
    w = np.array([max(c, 0.0) for _, c in pairs], dtype=np.float64)
    if w.size and w.sum() == 0:
        w[:] = 1.0
    return w


@dataclass
class SpanEntry:
    tokens: tuple[str, ...]
    freq: int
    vector: Optional[np.ndarray] = None  # pooled encoding, for similarity sampling


class SpanTable:
    """Training-set target spans grouped by type with frequencies.

    For tagging the type is the chunk type (AS/OP); for span classification
    it is the example's class label, so replacements stay label-consistent.
    """

    def __init__(self, entries: dict[str, list[SpanEntry]],
                 pooled_fn: Optional[Callable[[Sequence[Sequence[str]]], np.ndarray]] = None):
        if not entries or not any(entries.values()):
            raise DataError("span table has no target spans")
        self.entries = entries
        self._pooled_fn = pooled_fn
        self._pooled_cache: dict[tuple[str, ...], np.ndarray] = {}

    def types(self) -> list[str]:
        return sorted(self.entries)

    def spans_of(self, span_type: str) -> list[SpanEntry]:
        if span_type not in self.entries or not self.entries[span_type]:
            raise DataError(f"span table has no spans of type {span_type!r}")
        return self.entries[span_type]

    @property
    def has_vectors(self) -> bool:
        return self._pooled_fn is not None

    def pooled(self, tokens: Sequence[str]) -> np.ndarray:
        if self._pooled_fn is None:
            raise ConfigError("span table was built without a pooled encoder")
        key = tuple(tokens)
        if key not in self._pooled_cache:
            self._pooled_cache[key] = np.asarray(self._pooled_fn([key])[0], dtype=np.float64)
        return self._pooled_cache[key]


def build_span_table(
    dataset,
    pooled_fn: Optional[Callable[[Sequence[Sequence[str]]], np.ndarray]] = None,
) -> SpanTable:
    """Collect all target spans of a dataset into a SpanTable.

    pooled_fn, when given, maps a list of token sequences to pooled encoding
    vectors; these back cosine-based replacement sampling.
    """
    from . import corpus as _corpus  # local import to avoid a cycle

    counts: dict[str, Counter] = {}
    if isinstance(dataset, _corpus.TaggingDataset):
        for ex in dataset.examples:
            for chunk in _corpus.extract_chunks(ex.tags, dataset.vocab):
                key = tuple(ex.tokens[chunk.start : chunk.end + 1])
                counts.setdefault(chunk.type, Counter())[key] += 1
    elif isinstance(dataset, _corpus.SpanClsDataset):
        for ex in dataset.examples:
            cls = dataset.vocab.label(ex.label)
            for a, b in ex.spans:
                key = tuple(ex.tokens[a : b + 1])
                counts.setdefault(cls, Counter())[key] += 1
    else:
        raise ConfigError(f"unsupported dataset type {type(dataset).__name__}")

    entries: dict[str, list[SpanEntry]] = {}
    for span_type in sorted(counts):
        ordered = sorted(counts[span_type].items())
        vecs = [None] * len(ordered)
        if pooled_fn is not None and ordered:
            arr = pooled_fn([toks for toks, _ in ordered])
            vecs = [np.asarray(v, dtype=np.float64) for v in arr]
        entries[span_type] = [
            SpanEntry(toks, freq, vec)
            for (toks, freq), vec in zip(ordered, vecs)
        ]
    return SpanTable(entries, pooled_fn)
