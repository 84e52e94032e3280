"""Encoding-level interpolation of original and augmented examples.

Instead of training directly on an augmented sequence, the aligned pair of
original and augmented sequences is encoded separately and the two encodings
(and label structures) are convexly combined with a Beta-distributed weight.
The interpolated "virtual" sequence is never materialized as text; only its
encoding feeds the task head.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .augment import AlignedPair, AugmentTables, OpSpec, align, augment_example
from .corpus import IGNORE_LABEL, Batch, Example, TagVocab, TokenVocab
from .errors import ConfigError, DataError
from .model import EncodedBatch, Model, Provenance, cross_entropy, one_hot
from .sampling import RngStream, beta_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixLambda:
    """A Beta(alpha, alpha) draw and its effective value after adjustment."""

    raw: float
    effective: float
    alpha: float


def draw_mix_lambda(alpha: float, rng: RngStream, favor_original: bool = True) -> MixLambda:
    """Draw lambda ~ Beta(alpha, alpha); optionally keep max(lambda, 1-lambda).

    The max adjustment keeps the interpolation closer to the original
    example, whose labels are exact, than to the noisier augmented one.
    """
    raw = beta_sample(alpha, rng)
    eff = max(raw, 1.0 - raw) if favor_original else raw
    return MixLambda(raw, eff, alpha)


def _as_lambda_tensor(lam, batch_size: int) -> torch.Tensor:
    if isinstance(lam, torch.Tensor):
        t = lam.to(torch.float64)
    else:
        t = torch.as_tensor(lam, dtype=torch.float64)
    if t.dim() == 0:
        t = t.expand(batch_size)
    if t.shape != (batch_size,):
        raise ConfigError(f"lambda must be scalar or ({batch_size},), got {tuple(t.shape)}")
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ConfigError("interpolation weights must lie in [0, 1]")
    return t


def interpolate_encodings(
    e1: EncodedBatch, e2: EncodedBatch, lam
) -> EncodedBatch:
    """lam * e1 + (1 - lam) * e2, elementwise over (B, L, d).

    Shapes must match exactly; lam may be a scalar or a per-example vector.
    The result keeps e1's mask (the lambda-weighted side) and records both
    parents in its provenance.
    """
    if e1.shape != e2.shape:
        raise ConfigError(f"encoding shapes differ: {e1.shape} vs {e2.shape}")
    lam_t = _as_lambda_tensor(lam, e1.shape[0])[:, None, None]
    mixed = lam_t * e1.tensor + (1.0 - lam_t) * e2.tensor
    return EncodedBatch(mixed, e1.mask, Provenance("interpolated", lam, (e1, e2)))


def interpolate_labels(
    y1: np.ndarray,
    y2: np.ndarray,
    lam,
    valid: Optional[np.ndarray] = None,
) -> np.ndarray:
    """lam * y1 + (1 - lam) * y2 for probability rows.

    Rows (the trailing axis) must each sum to 1; with a `valid` mask only
    those rows are checked and combined, the rest pass through from y1.
    """
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape:
        raise DataError(f"label shapes differ: {y1.shape} vs {y2.shape}")
    rows1 = y1.reshape(-1, y1.shape[-1])
    rows2 = y2.reshape(-1, y2.shape[-1])
    flat_valid = (
        np.ones(rows1.shape[0], dtype=bool) if valid is None else np.asarray(valid, bool).reshape(-1)
    )
    for name, rows in (("y1", rows1), ("y2", rows2)):
        sums = rows[flat_valid].sum(axis=-1)
        if sums.size and not np.allclose(sums, 1.0, atol=1e-6):
            raise DataError(f"{name} rows do not sum to 1 (max dev {abs(sums - 1).max():.3g})")
    lam_arr = np.asarray(lam, dtype=np.float64)
    while lam_arr.ndim < y1.ndim:
        lam_arr = lam_arr[..., None]
    out = np.where(
        flat_valid.reshape(y1.shape[:-1] + (1,)),
        lam_arr * y1 + (1.0 - lam_arr) * y2,
        y1,
    )
    return out


@dataclass
class PairBatch:
    """Aligned original/augmented pairs padded into two parallel batches.

    target holds the interpolated label structure: the convex combination of
    the two sides' one-hot rows where both are real, and the original side's
    row where the augmented side is padding (the combination renormalizes to
    the only defined side). For every supported operator this equals the
    original labels. loss_mask marks the loss positions: original-side real,
    non-CLS columns for tagging; every example for span classification.
    """

    kind: str
    orig: Batch
    aug: Batch
    target: np.ndarray  # (B, L, C) tagging | (B, C) spancls
    loss_mask: np.ndarray  # (B, L) bool | (B,) bool
    pairs: list  # the AlignedPair objects


def pad_aligned_pairs(
    pairs: Sequence[AlignedPair],
    max_len: Optional[int],
    token_vocab: TokenVocab,
    n_labels: int,
    lambdas: Optional[np.ndarray] = None,
) -> PairBatch:
    """Pad aligned pairs to a common length with a CLS column prepended.

    Alignment pad columns keep attention mask 0 on their side, so they never
    influence real positions; they do occupy position slots, which is what
    keeps the two sides positionally comparable.
    """
    if not pairs:
        raise DataError("cannot pad an empty pair batch")
    kind = pairs[0].kind
    if any(p.kind != kind for p in pairs):
        raise DataError("mixed pair kinds in one batch")
    B = len(pairs)
    needed = max(len(p) for p in pairs) + 1
    L = needed if max_len is None else int(max_len)
    if needed > L:
        raise DataError(
            f"aligned pair needs {needed} positions (CLS included), max_len={L}"
        )

    pad_id, cls_id = token_vocab.pad_id, token_vocab.cls_id

    def side_arrays(token_lists, masks):
        ids = np.full((B, L), pad_id, dtype=np.int64)
        att = np.zeros((B, L), dtype=np.float64)
        ids[:, 0] = cls_id
        att[:, 0] = 1.0
        for i, (toks, m) in enumerate(zip(token_lists, masks)):
            n = len(toks)
            ids[i, 1 : n + 1] = [token_vocab.id(t) for t in toks]
            att[i, 1 : n + 1] = np.asarray(m, dtype=np.float64)
        return ids, att

    ids_x, att_x = side_arrays([p.x_tokens for p in pairs], [p.mask_x for p in pairs])
    ids_a, att_a = side_arrays([p.aug_tokens for p in pairs], [p.mask_aug for p in pairs])

    if kind == "tagging":
        tags_x = np.full((B, L), IGNORE_LABEL, dtype=np.int64)
        tags_a = np.full((B, L), IGNORE_LABEL, dtype=np.int64)
        for i, p in enumerate(pairs):
            n = len(p)
            tags_x[i, 1 : n + 1] = p.x_tags
            tags_a[i, 1 : n + 1] = p.aug_tags
        both = (tags_x != IGNORE_LABEL) & (tags_a != IGNORE_LABEL)
        y1 = one_hot(tags_x, n_labels)
        y2 = one_hot(tags_a, n_labels)
        lam = 1.0 if lambdas is None else lambdas[:, None]
        target = interpolate_labels(y1, y2, lam, valid=both)
        loss_mask = tags_x != IGNORE_LABEL
        orig = Batch("tagging", ids_x, att_x, tags_x, np.array([len(p.x_real()) for p in pairs]))
        aug = Batch("tagging", ids_a, att_a, tags_a, np.array([len(p.aug_real()) for p in pairs]))
        return PairBatch(kind, orig, aug, target, loss_mask, list(pairs))

    span_x = np.zeros((B, L), dtype=np.float64)
    span_a = np.zeros((B, L), dtype=np.float64)
    labels = np.zeros(B, dtype=np.int64)
    for i, p in enumerate(pairs):
        n = len(p)
        span_x[i, 1 : n + 1] = np.asarray(p.x_span_cols, dtype=np.float64)
        span_a[i, 1 : n + 1] = np.asarray(p.aug_span_cols, dtype=np.float64)
        labels[i] = p.label
    target = one_hot(labels, n_labels)
    orig = Batch("spancls", ids_x, att_x, labels,
                 np.array([len(p.x_real()) for p in pairs]), span_mask=span_x)
    aug = Batch("spancls", ids_a, att_a, labels,
                np.array([len(p.aug_real()) for p in pairs]), span_mask=span_a)
    return PairBatch(kind, orig, aug, target, np.ones(B, dtype=bool), list(pairs))


@dataclass
class MixdaPlan:
    """Everything a MixDA loss evaluation needs, with randomness frozen."""

    pair_batch: PairBatch
    lambdas: np.ndarray  # effective per-example interpolation weights
    draws: list  # MixLambda records
    augmented: list  # AugmentedExample records


def build_mixda_plan(
    examples: Sequence[Example],
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    *,
    token_vocab: TokenVocab,
    n_labels: int,
    max_len: Optional[int],
    alpha: float,
    vocab: Optional[TagVocab] = None,
    label_vocab=None,
    favor_original: bool = True,
    per_example_lambda: bool = True,
) -> MixdaPlan:
    """Augment and align a batch and freeze its interpolation weights.

    lambda is drawn per example by default; per-batch mode draws one value
    and reuses it across the batch.
    """
    augmented = []
    pairs = []
    for i, ex in enumerate(examples):
        a = augment_example(
            ex, spec, tables, rng.child("augment", i), vocab=vocab, label_vocab=label_vocab
        )
        augmented.append(a)
        pairs.append(align(ex, a))
    if per_example_lambda:
        draws = [
            draw_mix_lambda(alpha, rng.child("lambda", i), favor_original)
            for i in range(len(examples))
        ]
    else:
        shared = draw_mix_lambda(alpha, rng.child("lambda"), favor_original)
        draws = [shared] * len(examples)
    lambdas = np.array([d.effective for d in draws], dtype=np.float64)
    pair_batch = pad_aligned_pairs(pairs, max_len, token_vocab, n_labels, lambdas=lambdas)
    return MixdaPlan(pair_batch, lambdas, draws, augmented)


def mixda_loss(model: Model, plan: MixdaPlan) -> torch.Tensor:
    """Cross entropy on the interpolated encodings against interpolated labels."""
    pb = plan.pair_batch
    e1 = model.encode(pb.orig)
    e2 = model.encode(pb.aug)
    mixed = interpolate_encodings(e1, e2, torch.from_numpy(plan.lambdas))
    pred = model.predict(mixed)
    target = torch.from_numpy(pb.target)
    mask = torch.from_numpy(pb.loss_mask.astype(np.bool_))
    return cross_entropy(pred, target, mask)


def mixda_step(
    example: Example,
    op_spec: OpSpec,
    model: Model,
    alpha: float,
    rng: RngStream,
    *,
    tables: AugmentTables,
    token_vocab: TokenVocab,
    max_len: Optional[int],
    vocab: Optional[TagVocab] = None,
    label_vocab=None,
    favor_original: bool = True,
) -> tuple[torch.Tensor, MixdaPlan]:
    """One example's MixDA loss contribution.

    Augment, align, draw lambda (max-adjusted by default), encode both
    sides, interpolate encodings and labels, and evaluate the masked cross
    entropy. A noop augmentation degenerates to the plain supervised loss on
    the original example, since both sides of the pair coincide.
    """
    plan = build_mixda_plan(
        [example],
        op_spec,
        tables,
        rng,
        token_vocab=token_vocab,
        n_labels=model.config.n_labels,
        max_len=max_len,
        alpha=alpha,
        vocab=vocab,
        label_vocab=label_vocab,
        favor_original=favor_original,
    )
    if plan.augmented[0].noop:
        log.debug("noop augmentation; step equals the supervised loss")
    return mixda_loss(model, plan), plan
