"""Semi-supervised training with label guessing and encoding-level mixing.

Each step augments the labeled batch once and every unlabeled example k
times, guesses soft labels for the unlabeled examples by averaging (and
sharpening) frozen-model predictions over their augmented variants, then
mixes the labeled virtual batch and the unlabeled batch against a shuffled
pool of both, in encoding space. The loss is supervised cross entropy on
the labeled virtual batch plus a weighted squared-distance consistency term
on the unlabeled virtual batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentTables, OpSpec, align, augment_example
from .corpus import Example, TagVocab, TokenVocab
from .errors import ConfigError, DataError
from .mixda import (
    MixLambda,
    MixdaPlan,
    PairBatch,
    build_mixda_plan,
    draw_mix_lambda,
    interpolate_encodings,
    mixda_loss,
    pad_aligned_pairs,
)
from .model import EncodedBatch, Model, Provenance, brier, cross_entropy
from .sampling import RngStream, beta_sample

log = logging.getLogger(__name__)


@dataclass
class MixMatchConfig:
    batch_size: int = 32
    k: int = 2  # augmented guesses per unlabeled example
    temperature: float = 0.5
    alpha_aug: float = 0.2
    alpha_mix: float = 0.2
    lambda_u: float = 0.1
    favor_original: bool = True  # max-adjust the augmentation lambda

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not (0.0 < self.temperature <= 1.0):
            raise ConfigError("temperature must be in (0, 1]")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")
        if self.alpha_aug <= 0 or self.alpha_mix <= 0:
            raise ConfigError("alpha parameters must be > 0")


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-sharpen probability rows: p_i^(1/T) / sum_j p_j^(1/T).

    T = 1 is the exact identity; T -> 0 approaches one-hot at the argmax.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if temperature > 1:
        raise ConfigError(f"temperature must be <= 1, got {temperature}")
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise DataError("cannot sharpen negative probabilities")
    if temperature == 1.0:
        return p.copy()
    powered = p ** (1.0 / temperature)
    denom = powered.sum(axis=-1, keepdims=True)
    if (denom == 0).any():
        raise DataError("cannot sharpen an all-zero row")
    return powered / denom


@dataclass
class GuessedBatch:
    """Averaged and sharpened soft labels for a batch of unlabeled examples.

    For tagging, q_bar/q live on each example's own grid (CLS at 0, tokens
    from 1) and mask marks the guessed token rows; for span classification
    they are one row per example.
    """

    examples: list
    variants: list  # per example, its k AugmentedExample records
    q_bar: np.ndarray
    q: np.ndarray
    mask: np.ndarray
    temperature: float


def _guess_from_pairs(
    model: Model,
    u_pb: PairBatch,
    pairs: list,
    n_examples: int,
    k: int,
    temperature: float,
    lam1: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Average frozen-model predictions over k variant rows (j-major order)."""
    with torch.no_grad():
        e1 = model.encode(u_pb.orig)
        e2 = model.encode(u_pb.aug)
        mixed = interpolate_encodings(e1, e2, lam1)
        pred = model.predict(mixed).numpy()

    B, L = n_examples, u_pb.orig.seq_len
    if u_pb.kind == "spancls":
        q_bar = pred.reshape(k, B, -1).mean(axis=0)
        mask = np.ones(B, dtype=bool)
    else:
        C = pred.shape[-1]
        q_bar = np.zeros((B, L, C), dtype=np.float64)
        mask = np.zeros((B, L), dtype=bool)
        for r, pair in enumerate(pairs):
            i = r % B
            cols = [c + 1 for c, real in enumerate(pair.mask_x) if real]
            n = len(cols)
            q_bar[i, 1 : n + 1] += pred[r, cols] / k
            mask[i, 1 : n + 1] = True
    q = q_bar.copy()
    if mask.any():
        q[mask] = sharpen(q_bar[mask], temperature)
    return q_bar, q, mask


def guess_labels(
    model: Model,
    unlabeled: Sequence[Example],
    k: int,
    config: MixMatchConfig,
    rng: RngStream,
    *,
    spec: OpSpec,
    tables: AugmentTables,
    token_vocab: TokenVocab,
    max_len: Optional[int],
    vocab: Optional[TagVocab] = None,
    label_vocab=None,
    lam1: Optional[float] = None,
) -> GuessedBatch:
    """Guess soft labels by averaging predictions over k augmented variants.

    Each variant's forward pass runs on the interpolated encoding of the
    example and its augmentation (the same partial-augmentation treatment
    used for training), with the model snapshot frozen throughout. The
    average is then sharpened toward one-hot with the configured
    temperature.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if lam1 is None:
        lam1 = draw_mix_lambda(config.alpha_aug, rng.child("lambda1"), config.favor_original).effective
    B = len(unlabeled)
    variants = [[] for _ in range(B)]
    pairs = []
    for j in range(k):
        for i, ex in enumerate(unlabeled):
            a = augment_example(
                ex, spec, tables, rng.child("u-augment", j * B + i),
                vocab=vocab, label_vocab=label_vocab,
            )
            variants[i].append(a)
            pairs.append(align(ex, a))
    u_pb = pad_aligned_pairs(pairs, max_len, token_vocab, model.config.n_labels)
    q_bar, q, mask = _guess_from_pairs(
        model, u_pb, pairs, B, k, config.temperature, lam1
    )
    return GuessedBatch(list(unlabeled), variants, q_bar, q, mask, config.temperature)


def _mix_label_rows(
    primary: np.ndarray,
    primary_valid: np.ndarray,
    partner: np.ndarray,
    partner_valid: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Convexly combine label rows where both sides have one.

    Rows with no partner label (the partner is padding there) keep the
    primary row: the combination renormalizes to the only defined side.
    """
    out = primary.copy()
    both = primary_valid & partner_valid
    out[both] = lam * primary[both] + (1.0 - lam) * partner[both]
    return out


@dataclass
class MixedBatches:
    """Virtual labeled and unlabeled batches after shuffling and mixing."""

    enc_x: EncodedBatch
    y: np.ndarray
    y_mask: np.ndarray
    enc_u: EncodedBatch
    q: np.ndarray
    q_mask: np.ndarray
    lam1: float
    lam2: float
    perm: np.ndarray


def mixmatch_mix(
    enc_x: EncodedBatch,
    enc_xhat: EncodedBatch,
    enc_uhat: EncodedBatch,
    labels: tuple,
    guesses: tuple,
    config: MixMatchConfig,
    rng: Optional[RngStream],
    *,
    lam1: Optional[float] = None,
    lam2: Optional[float] = None,
    perm: Optional[np.ndarray] = None,
) -> MixedBatches:
    """The four mixing steps over already-computed encodings.

    (1) takes enc(originals), enc(augmented labeled), enc(augmented
    unlabeled); (2) draws lam1 ~ Beta(alpha_aug, alpha_aug) and lam2 ~
    Beta(alpha_mix, alpha_mix) with lam2 <- max(lam2, 1 - lam2) so the mix
    stays closer to its primary batch; (3) forms the labeled virtual batch
    lam1 * enc(X) + (1 - lam1) * enc(X_aug); (4) shuffles the union of that
    batch and the unlabeled encodings and mixes both batches against it,
    interpolating labels/guesses with the same lam2.

    labels and guesses are (rows, valid_mask) pairs; explicit lam1/lam2/perm
    override the draws (used to freeze a step for gradient checks).
    """
    if enc_x.shape != enc_xhat.shape:
        raise ConfigError(f"labeled encoding shapes differ: {enc_x.shape} vs {enc_xhat.shape}")
    B = enc_x.shape[0]
    kB = enc_uhat.shape[0]
    if kB != config.k * B:
        raise ConfigError(f"expected {config.k}*{B} unlabeled rows, got {kB}")
    if enc_uhat.shape[1:] != enc_x.shape[1:]:
        raise ConfigError(
            f"unlabeled encoding shape {enc_uhat.shape} incompatible with {enc_x.shape}"
        )
    y, y_mask = labels
    q, q_mask = guesses
    if y.shape[0] != B or q.shape[0] != kB:
        raise ConfigError("label/guess row counts do not match the encodings")

    if lam1 is None:
        lam1 = draw_mix_lambda(config.alpha_aug, rng.child("lambda1"), config.favor_original).effective
    if lam2 is None:
        lam2 = beta_sample(config.alpha_mix, rng.child("lambda2"))
    lam2 = max(lam2, 1.0 - lam2)
    if perm is None:
        perm = rng.child("shuffle").permutation(B + kB)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(B + kB)):
        raise ConfigError("perm is not a permutation of the pooled rows")

    enc_xv_hat = interpolate_encodings(enc_x, enc_xhat, lam1)

    pool_enc = torch.cat([enc_xv_hat.tensor, enc_uhat.tensor], dim=0)
    pool_mask = torch.cat([enc_xv_hat.mask, enc_uhat.mask], dim=0)
    pool_labels = np.concatenate([y, q], axis=0)
    pool_valid = np.concatenate([y_mask, q_mask], axis=0)
    perm_t = torch.from_numpy(perm)
    w_enc = pool_enc[perm_t]
    w_labels = pool_labels[perm]
    w_valid = pool_valid[perm]

    enc_xv = lam2 * enc_xv_hat.tensor + (1.0 - lam2) * w_enc[:B]
    enc_uv = lam2 * enc_uhat.tensor + (1.0 - lam2) * w_enc[B:]
    y_v = _mix_label_rows(y, y_mask, w_labels[:B], w_valid[:B], lam2)
    q_v = _mix_label_rows(q, q_mask, w_labels[B:], w_valid[B:], lam2)

    return MixedBatches(
        enc_x=EncodedBatch(enc_xv, enc_xv_hat.mask, Provenance("interpolated", lam2)),
        y=y_v,
        y_mask=y_mask,
        enc_u=EncodedBatch(enc_uv, enc_uhat.mask, Provenance("interpolated", lam2)),
        q=q_v,
        q_mask=q_mask,
        lam1=float(lam1),
        lam2=float(lam2),
        perm=perm,
    )


def mixmatch_loss(
    pred_x: torch.Tensor,
    y_v: np.ndarray,
    mask_x: np.ndarray,
    pred_u: torch.Tensor,
    q_v: np.ndarray,
    mask_u: np.ndarray,
    lambda_u: float,
    n_labels: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Supervised cross entropy plus weighted unlabeled consistency.

    Returns (total, loss_x, loss_u) with total = loss_x + lambda_u * loss_u.
    """
    loss_x = cross_entropy(pred_x, torch.from_numpy(y_v), torch.from_numpy(mask_x))
    loss_u = brier(pred_u, torch.from_numpy(q_v), torch.from_numpy(mask_u), n_labels)
    return loss_x + lambda_u * loss_u, loss_x, loss_u


@dataclass
class MixMatchPlan:
    """A fully materialized step: augmentations, guesses, draws, shuffle."""

    kind: str
    labeled_pb: PairBatch
    u_pb: Optional[PairBatch]
    u_pairs: Optional[list]
    guesses: Optional[GuessedBatch]
    y_rows: np.ndarray
    y_mask: np.ndarray
    q_rows: Optional[np.ndarray]
    q_mask: Optional[np.ndarray]
    lam1: MixLambda
    lam2: Optional[MixLambda]
    perm: Optional[np.ndarray]
    config: MixMatchConfig
    degraded: Optional[MixdaPlan] = None  # set when no unlabeled data exists


def build_mixmatch_plan(
    labeled: Sequence[Example],
    unlabeled: Sequence[Example],
    model: Model,
    config: MixMatchConfig,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    *,
    token_vocab: TokenVocab,
    max_len: Optional[int],
    vocab: Optional[TagVocab] = None,
    label_vocab=None,
    force_lam2: Optional[float] = None,
) -> MixMatchPlan:
    """Materialize one training step with all randomness frozen.

    Guessing runs here on the current (frozen) parameters, so the resulting
    plan's loss is a pure function of the model parameters.
    """
    if not labeled:
        raise ConfigError("mixmatch step needs a labeled batch")
    if not unlabeled:
        raise ConfigError("use mixmatch_step for the degraded no-unlabeled mode")
    n_labels = model.config.n_labels
    B = len(labeled)
    k = config.k

    lam1 = draw_mix_lambda(config.alpha_aug, rng.child("lambda1"), config.favor_original)

    labeled_pairs = []
    for i, ex in enumerate(labeled):
        a = augment_example(
            ex, spec, tables, rng.child("x-augment", i), vocab=vocab, label_vocab=label_vocab
        )
        labeled_pairs.append(align(ex, a))
    labeled_pb = pad_aligned_pairs(
        labeled_pairs, max_len, token_vocab, n_labels,
        lambdas=np.full(B, lam1.effective),
    )

    u_pairs = []
    variants = [[] for _ in range(len(unlabeled))]
    for j in range(k):
        for i, ex in enumerate(unlabeled):
            a = augment_example(
                ex, spec, tables, rng.child("u-augment", j * len(unlabeled) + i),
                vocab=vocab, label_vocab=label_vocab,
            )
            variants[i].append(a)
            u_pairs.append(align(ex, a))
    u_pb = pad_aligned_pairs(u_pairs, max_len, token_vocab, n_labels)

    q_bar, q, gmask = _guess_from_pairs(
        model, u_pb, u_pairs, len(unlabeled), k, config.temperature, lam1.effective
    )
    guesses = GuessedBatch(list(unlabeled), variants, q_bar, q, gmask, config.temperature)

    L = labeled_pb.orig.seq_len
    if labeled_pb.kind == "tagging":
        q_rows = np.zeros((k * B, L, n_labels), dtype=np.float64)
        q_mask = np.zeros((k * B, L), dtype=bool)
        for r, pair in enumerate(u_pairs):
            i = r % len(unlabeled)
            cols = [c + 1 for c, real in enumerate(pair.mask_x) if real]
            n = len(cols)
            q_rows[r, cols] = q[i, 1 : n + 1]
            q_mask[r, cols] = True
    else:
        q_rows = np.concatenate([q] * k, axis=0)
        q_mask = np.ones(k * B, dtype=bool)

    raw2 = force_lam2 if force_lam2 is not None else beta_sample(config.alpha_mix, rng.child("lambda2"))
    lam2 = MixLambda(float(raw2), max(float(raw2), 1.0 - float(raw2)), config.alpha_mix)
    perm = rng.child("shuffle").permutation(B + k * B)

    return MixMatchPlan(
        kind=labeled_pb.kind,
        labeled_pb=labeled_pb,
        u_pb=u_pb,
        u_pairs=u_pairs,
        guesses=guesses,
        y_rows=labeled_pb.target,
        y_mask=labeled_pb.loss_mask,
        q_rows=q_rows,
        q_mask=q_mask,
        lam1=lam1,
        lam2=lam2,
        perm=perm,
        config=config,
    )


def mixmatch_loss_from_plan(
    model: Model, plan: MixMatchPlan
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Evaluate a frozen plan's loss as a differentiable function of params."""
    if plan.degraded is not None:
        loss = mixda_loss(model, plan.degraded)
        zero = loss.detach() * 0.0
        return loss, loss, zero
    enc_x = model.encode(plan.labeled_pb.orig)
    enc_xhat = model.encode(plan.labeled_pb.aug)
    enc_uhat = model.encode(plan.u_pb.aug)
    mixed = mixmatch_mix(
        enc_x,
        enc_xhat,
        enc_uhat,
        (plan.y_rows, plan.y_mask),
        (plan.q_rows, plan.q_mask),
        plan.config,
        None,
        lam1=plan.lam1.effective,
        lam2=plan.lam2.effective,
        perm=plan.perm,
    )
    pred_x = model.predict(mixed.enc_x)
    pred_u = model.predict(mixed.enc_u)
    return mixmatch_loss(
        pred_x, mixed.y, mixed.y_mask, pred_u, mixed.q, mixed.q_mask,
        plan.config.lambda_u, model.config.n_labels,
    )


def mixmatch_step(
    labeled: Sequence[Example],
    unlabeled: Sequence[Example],
    model: Model,
    config: MixMatchConfig,
    spec: OpSpec,
    tables: AugmentTables,
    rng: RngStream,
    *,
    token_vocab: TokenVocab,
    max_len: Optional[int],
    vocab: Optional[TagVocab] = None,
    label_vocab=None,
    force_lam2: Optional[float] = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, MixMatchPlan]:
    """One semi-supervised step: augment, guess, mix, and evaluate the loss.

    With no unlabeled data the step degrades to a plain MixDA batch (same
    rng lineage as build_mixda_plan) and the unlabeled loss term is zero.
    Returns (total, loss_x, loss_u, plan); the caller backpropagates.
    """
    if not unlabeled:
        log.info("no unlabeled data in this step; degrading to a MixDA batch")
        degraded = build_mixda_plan(
            labeled, spec, tables, rng,
            token_vocab=token_vocab, n_labels=model.config.n_labels,
            max_len=max_len, alpha=config.alpha_aug,
            vocab=vocab, label_vocab=label_vocab,
            favor_original=config.favor_original,
        )
        plan = MixMatchPlan(
            kind=degraded.pair_batch.kind,
            labeled_pb=degraded.pair_batch,
            u_pb=None, u_pairs=None, guesses=None,
            y_rows=degraded.pair_batch.target,
            y_mask=degraded.pair_batch.loss_mask,
            q_rows=None, q_mask=None,
            lam1=degraded.draws[0],
            lam2=None, perm=None,
            config=config,
            degraded=degraded,
        )
        total, loss_x, loss_u = mixmatch_loss_from_plan(model, plan)
        return total, loss_x, loss_u, plan

    plan = build_mixmatch_plan(
        labeled, unlabeled, model, config, spec, tables, rng,
        token_vocab=token_vocab, max_len=max_len,
        vocab=vocab, label_vocab=label_vocab, force_lam2=force_lam2,
    )
    total, loss_x, loss_u = mixmatch_loss_from_plan(model, plan)
    return total, loss_x, loss_u, plan
