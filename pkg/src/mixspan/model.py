"""Trainable sequence encoder with task heads, losses, and gradient checks.

The encoder is a small transformer trained from random initialization:
learned token and position embeddings followed by n_layers blocks of
single-head scaled dot-product self-attention and a position-wise
feed-forward, each with residual + layer norm. It produces per-position
contextual vectors plus a pooled vector at the CLS position, which is the
surface that encoding-level interpolation operates on. Everything runs in
float64 on CPU so analytic gradients can be checked against central
finite differences.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import IGNORE_LABEL, Batch, TokenVocab
from .errors import ConfigError, DataError, NumericError
from .sampling import RngStream

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SNXT1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    task: str  # "tagging" | "spancls"
    vocab_size: int  # token vocabulary size, specials included
    n_labels: int  # tag count (tagging) or class count (spancls)
    d_model: int = 64
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 64

    def __post_init__(self):
        if self.task not in ("tagging", "spancls"):
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("vocab_size", "n_labels", "d_model", "n_layers", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "vocab_size": self.vocab_size,
            "n_labels": self.n_labels,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
        }


@dataclass(frozen=True)
class Provenance:
    kind: str  # "raw" | "interpolated"
    lam: object = None
    parents: tuple = ()


@dataclass
class EncodedBatch:
    """Per-position encodings (B, L, d) with the batch mask and provenance."""

    tensor: torch.Tensor
    mask: torch.Tensor  # (B, L) bool, True on CLS and real tokens
    provenance: Provenance = field(default_factory=lambda: Provenance("raw"))

    @property
    def shape(self):
        return tuple(self.tensor.shape)


class _Block(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        kw = {"dtype": torch.float64}
        self.wq = nn.Linear(d_model, d_model, **kw)
        self.wk = nn.Linear(d_model, d_model, **kw)
        self.wv = nn.Linear(d_model, d_model, **kw)
        self.wo = nn.Linear(d_model, d_model, **kw)
        self.ff1 = nn.Linear(d_model, d_ff, **kw)
        self.ff2 = nn.Linear(d_ff, d_model, **kw)
        self.ln1_w = nn.Parameter(torch.ones(d_model, dtype=torch.float64))
        self.ln1_b = nn.Parameter(torch.zeros(d_model, dtype=torch.float64))
        self.ln2_w = nn.Parameter(torch.ones(d_model, dtype=torch.float64))
        self.ln2_b = nn.Parameter(torch.zeros(d_model, dtype=torch.float64))
        self.scale = 1.0 / math.sqrt(d_model)

    def forward(self, h: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        scores = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        scores = scores.masked_fill(~key_mask[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        h = h + self.wo(torch.matmul(attn, v))
        h = F.layer_norm(h, h.shape[-1:], self.ln1_w, self.ln1_b)
        h = h + self.ff2(F.gelu(self.ff1(h)))
        return F.layer_norm(h, h.shape[-1:], self.ln2_w, self.ln2_b)


class Encoder(nn.Module):
    """Token + position embeddings and a stack of attention blocks.

    PAD positions are excluded from the attention keys, so appending extra
    padding never changes the encodings of real positions. For span tasks a
    learned marker embedding is added at in-span positions so the encoder
    can see which span the example is about.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Parameter(torch.zeros(config.vocab_size, d, dtype=torch.float64))
        self.pos_emb = nn.Parameter(torch.zeros(config.max_len, d, dtype=torch.float64))
        if config.task == "spancls":
            self.span_emb = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.blocks = nn.ModuleList(
            _Block(d, config.d_ff) for _ in range(config.n_layers)
        )

    def forward(
        self,
        token_ids: torch.Tensor,
        attention_mask: torch.Tensor,
        span_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        B, L = token_ids.shape
        if L > self.config.max_len:
            raise DataError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        if int(token_ids.max()) >= self.config.vocab_size:
            raise DataError("token id out of range for the embedding table")
        h = self.tok_emb[token_ids] + self.pos_emb[:L][None, :, :]
        if span_mask is not None:
            if self.config.task != "spancls":
                raise ConfigError("span_mask only applies to span-classification models")
            h = h + span_mask[:, :, None] * self.span_emb
        key_mask = attention_mask.bool()
        for block in self.blocks:
            h = block(h, key_mask)
        return h


class TaggingHead(nn.Module):
    """Shared affine map + softmax over tags at every position."""

    def __init__(self, d_model: int, n_tags: int):
        super().__init__()
        self.proj = nn.Linear(d_model, n_tags, dtype=torch.float64)

    def forward(self, enc: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.proj(enc), dim=-1)


class SpanClsHead(nn.Module):
    """Affine map + softmax over classes on the pooled (position 0) vector."""

    def __init__(self, d_model: int, n_classes: int):
        super().__init__()
        self.proj = nn.Linear(d_model, n_classes, dtype=torch.float64)

    def forward(self, enc: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.proj(enc[:, 0, :]), dim=-1)


class Model(nn.Module):
    """Encoder plus task head with Batch-level convenience methods."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        if config.task == "tagging":
            self.head = TaggingHead(config.d_model, config.n_labels)
        else:
            self.head = SpanClsHead(config.d_model, config.n_labels)

    def encode(self, batch: Batch) -> EncodedBatch:
        ids, mask, span_mask = batch_tensors(batch)
        enc = self.encoder(ids, mask, span_mask)
        return EncodedBatch(enc, mask.bool(), Provenance("raw"))

    def predict(self, enc: EncodedBatch) -> torch.Tensor:
        return self.head(enc.tensor)


def batch_tensors(batch: Batch):
    ids = torch.from_numpy(np.ascontiguousarray(batch.token_ids)).long()
    mask = torch.from_numpy(np.ascontiguousarray(batch.attention_mask)).to(torch.float64)
    span_mask = None
    if batch.span_mask is not None:
        span_mask = torch.from_numpy(np.ascontiguousarray(batch.span_mask)).to(torch.float64)
    return ids, mask, span_mask


def init_params(model: Model, rng: RngStream) -> None:
    """Deterministically initialize all parameters from a seeded stream.

    Each parameter gets its own child stream keyed by name, so values do not
    depend on iteration order. Embeddings use N(0, 0.02); linear weights use
    N(0, 1/sqrt(fan_in)); biases and layer-norm offsets are 0, gains 1.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            child = rng.child("init:" + name)
            if name.endswith("ln1_w") or name.endswith("ln2_w"):
                p.fill_(1.0)
            elif name.endswith(("ln1_b", "ln2_b", ".bias")):
                p.zero_()
            elif "emb" in name:
                vals = 0.02 * child.standard_normal(tuple(p.shape))
                p.copy_(torch.from_numpy(vals))
            else:
                fan_in = p.shape[-1]
                vals = child.standard_normal(tuple(p.shape)) / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(vals))


def one_hot(ids: np.ndarray, n: int) -> np.ndarray:
    """One-hot rows for id arrays; negative ids (ignore positions) give zero rows."""
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (n,), dtype=np.float64)
    valid = ids >= 0
    out[valid, ids[valid]] = 1.0
    return out


def cross_entropy(
    pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean over unmasked rows of -sum_c target_c * ln(pred_c).

    Supports soft targets. Probabilities that are exactly 0 where the target
    is positive are clamped at 1e-12 (and the event logged).
    """
    if pred.shape != target.shape:
        raise ConfigError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    mask = mask.bool()
    with torch.no_grad():
        bad = (pred <= 0) & (target > 0) & mask.unsqueeze(-1)
        if bool(bad.any()):
            log.warning("cross_entropy clamped %d zero probabilities", int(bad.sum()))
    rows = -(target * torch.log(pred.clamp_min(1e-12))).sum(-1)
    n = mask.sum()
    if int(n) == 0:
        return pred.sum() * 0.0
    return (rows * mask.to(rows.dtype)).sum() / n


def brier(
    pred: torch.Tensor, guess: torch.Tensor, mask: torch.Tensor, vocab_size: int
) -> torch.Tensor:
    """Squared-distance consistency loss, normalized by vocab size and rows.

    (1 / (v * n_rows)) * sum over unmasked rows of ||guess - pred||^2.
    """
    if pred.shape != guess.shape:
        raise ConfigError(f"pred shape {tuple(pred.shape)} != guess {tuple(guess.shape)}")
    mask = mask.bool()
    sq = ((guess - pred) ** 2).sum(-1)
    n = mask.sum()
    if int(n) == 0:
        return pred.sum() * 0.0
    return (sq * mask.to(sq.dtype)).sum() / (vocab_size * n)


def make_optimizer(model: Model, learning_rate: float) -> torch.optim.Adam:
    if learning_rate <= 0:
        raise ConfigError("learning rate must be positive")
    return torch.optim.Adam(model.parameters(), lr=learning_rate)


def backward_and_step(
    loss: torch.Tensor, model: Model, optimizer: torch.optim.Optimizer
) -> float:
    """Backpropagate and apply one optimizer step.

    Gradients flow through interpolation nodes into both parent forward
    passes with weights lam and (1 - lam). Aborts with NumericError on any
    non-finite loss or gradient, leaving parameters untouched.
    """
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite loss: {float(loss.detach())}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            optimizer.zero_grad(set_to_none=True)
            raise NumericError(f"non-finite gradient in {name}")
    optimizer.step()
    return float(loss.detach())


def finite_diff_check(
    model: Model,
    loss_fn: Callable[[], torch.Tensor],
    n_coords: int,
    rng: RngStream,
    h: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must be a pure function of the model parameters (all data and
    random draws frozen). Relative error per coordinate is
    |g_an - g_fd| / max(1e-8, |g_an| + |g_fd|).
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    params = [p for _, p in model.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])

    max_rel = 0.0
    for _ in range(n_coords):
        flat = int(rng.integers(total))
        pi = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (0 if pi == 0 else int(bounds[pi - 1]))
        p = params[pi]
        g_an = 0.0 if p.grad is None else float(p.grad.reshape(-1)[offset])
        with torch.no_grad():
            flat_view = p.reshape(-1)
            orig = float(flat_view[offset])
            flat_view[offset] = orig + h
            lp = float(loss_fn())
            flat_view[offset] = orig - h
            lm = float(loss_fn())
            flat_view[offset] = orig
        g_fd = (lp - lm) / (2.0 * h)
        rel = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
        max_rel = max(max_rel, rel)
    model.zero_grad(set_to_none=True)
    return max_rel


def save_checkpoint(path: Union[str, Path], model: Model, config_echo: dict) -> None:
    """Write a checkpoint: magic, version, config JSON, named f32 tensors."""
    blob = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            nb = name.encode("utf-8")
            arr = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, dict]:
    """Read a checkpoint; returns ({name: f32 array}, config_echo)."""
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals[0] if len(vals) == 1 else vals

    version = take("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    blob_len = take("<I")
    config_echo = json.loads(data[off : off + blob_len].decode("utf-8"))
    off += blob_len
    n_tensors = take("<I")
    tensors: dict = {}
    for _ in range(n_tensors):
        name_len = take("<H")
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        ndim = take("<B")
        shape = tuple(take("<I") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        tensors[name] = arr.copy()
    if off != len(data):
        raise DataError(f"{path}: {len(data) - off} trailing bytes")
    return tensors, config_echo


def load_into_model(model: Model, tensors: dict) -> None:
    state = model.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    with torch.no_grad():
        for name, p in state.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise DataError(
                    f"checkpoint tensor {name}: shape {arr.shape} != {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr.astype(np.float64)))


def make_pooled_fn(model: Model, token_vocab: TokenVocab):
    """A no-grad callable mapping token sequences to pooled CLS vectors.

    Used to give the span table cosine-comparable span encodings. For span
    tasks the whole mini-sequence is marked as in-span.
    """

    def pooled(seqs: Sequence[Sequence[str]]) -> np.ndarray:
        L = max(len(s) for s in seqs) + 1
        B = len(seqs)
        ids = np.full((B, L), token_vocab.pad_id, dtype=np.int64)
        mask = np.zeros((B, L), dtype=np.float64)
        ids[:, 0] = token_vocab.cls_id
        mask[:, 0] = 1.0
        span = np.zeros((B, L), dtype=np.float64)
        for i, s in enumerate(seqs):
            ids[i, 1 : len(s) + 1] = [token_vocab.id(t) for t in s]
            mask[i, 1 : len(s) + 1] = 1.0
            span[i, 1 : len(s) + 1] = 1.0
        with torch.no_grad():
            enc = model.encoder(
                torch.from_numpy(ids),
                torch.from_numpy(mask),
                torch.from_numpy(span) if model.config.task == "spancls" else None,
            )
        return enc[:, 0, :].numpy()

    return pooled
