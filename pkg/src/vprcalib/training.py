"""Triplet-margin fine-tuning of an affine embedding head.

The head maps a raw descriptor ``x`` to ``W @ x + b``.  For a tuple with
query ``q``, positive ``p`` and negatives ``n_i`` the loss is

    sum_i max(d(q, p) + m - d(q, n_i), 0)

with ``d`` the Euclidean distance between embeddings.  The bias cancels in
every distance, so its gradient is identically zero; it is kept so a head
checkpoint is a general affine map.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateDistance,
    DimensionMismatch,
    IoFailure,
    MissingDescriptor,
    RejectedTupleInTrainingSet,
    SchemaViolation,
)
from .mining import TupleStatus

log = logging.getLogger(__name__)

_MIN_DISTANCE = 1e-12


@dataclass(frozen=True, eq=False)
class EmbeddingHead:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    def __post_init__(self):
        W = np.array(self.weight, dtype=float)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if W.ndim != 2 or W.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"weight {W.shape} and bias {b.shape} disagree")
        if W.shape[0] > W.shape[1]:
            raise DimensionMismatch("d_out must not exceed d_in")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("head parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", W)
        object.__setattr__(self, "bias", b)

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]


def embed(head: EmbeddingHead, x):
    """Affine map of one descriptor ``(d_in,)`` or a batch ``(n, d_in)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != head.d_in:
        raise DimensionMismatch(f"expected dimension {head.d_in}, got {x.shape[-1]}")
    return x @ head.weight.T + head.bias


def triplet_loss(q, p, negatives, margin):
    """Hinge triplet loss summed over negatives, on already embedded vectors."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=float))
    if p.shape != q.shape or negatives.shape[1:] != q.shape:
        raise DimensionMismatch("query, positive and negatives must share one dimension")
    if len(negatives) == 0:
        raise ValueError("at least one negative is required")
    dp = np.sqrt(np.sum((q - p) ** 2))
    dn = np.sqrt(np.sum((q - negatives) ** 2, axis=1))
    return float(np.sum(np.maximum(dp + margin - dn, 0.0)))


def loss_gradient(head: EmbeddingHead, xq, xp, xn, margin):
    """Loss and its gradient w.r.t. ``(weight, bias)`` for one raw tuple.

    Returns ``(loss, grad_weight, grad_bias)``.  Terms whose hinge is not
    strictly active contribute nothing.
    """
    W = head.weight
    xq = np.asarray(xq, dtype=float)
    u = xq - np.asarray(xp, dtype=float)
    V = xq - np.atleast_2d(np.asarray(xn, dtype=float))
    if u.shape[-1] != head.d_in or V.shape[-1] != head.d_in:
        raise DimensionMismatch(f"expected dimension {head.d_in}")
    eu = W @ u
    EV = V @ W.T
    dp = float(np.sqrt(np.sum(eu**2)))
    dn = np.sqrt(np.sum(EV**2, axis=1))
    hinge = dp + margin - dn
    active = hinge > 0
    loss = float(np.sum(np.where(active, hinge, 0.0)))
    gW = np.zeros_like(W)
    if np.any(active):
        if dp < _MIN_DISTANCE or np.any(dn[active] < _MIN_DISTANCE):
            raise DegenerateDistance("embedded pair coincides; distance gradient undefined")
        gW += np.count_nonzero(active) * np.outer(eu / dp, u)
        gW -= (EV[active] / dn[active, None]).T @ V[active]
    return loss, gW, np.zeros(head.d_out)


@dataclass
class TrainConfig:
    margin: float = 0.25
    learning_rate: float = 1e-3
    epochs: int = 30
    grad_clip_norm: float | None = 1.0
    cosine_decay: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0 or None")


def clip_gradients(gW, gb, max_norm):
    """Scale both gradients so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(float(np.sum(gW**2) + np.sum(gb**2)))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        return gW * s, gb * s, norm
    return gW, gb, norm


def learning_rate_at(config: TrainConfig, step, total_steps):
    if not config.cosine_decay or total_steps <= 0:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _lookup(descriptors, kf):
    try:
        return np.asarray(descriptors[kf], dtype=float)
    except (KeyError, IndexError):
        raise MissingDescriptor(kf) from None


def train(head: EmbeddingHead, tuples, descriptors, config: TrainConfig | None = None):
    """Plain SGD, one tuple per step, over seeded shuffles of ``tuples``.

    ``descriptors`` is anything indexable by keyframe id (array or mapping).
    Returns the tuned head and the mean loss of every epoch.
    """
    config = config or TrainConfig()
    for t in tuples:
        if t.status is not TupleStatus.INLIER:
            raise RejectedTupleInTrainingSet(f"tuple anchored at {t.anchor_id} has status {t.status.value}")
    data = [
        (
            _lookup(descriptors, t.anchor_id),
            _lookup(descriptors, t.positive_id),
            np.array([_lookup(descriptors, k) for k in t.negative_ids]),
        )
        for t in tuples
    ]
    W = np.array(head.weight)
    b = np.array(head.bias)
    rng = np.random.default_rng(config.seed)
    history = []
    total = config.epochs * len(data)
    step = 0
    skipped = 0
    for _ in range(config.epochs):
        losses = []
        for idx in rng.permutation(len(data)):
            xq, xp, xn = data[idx]
            current = EmbeddingHead(W, b)
            try:
                loss, gW, gb = loss_gradient(current, xq, xp, xn, config.margin)
            except DegenerateDistance:
                skipped += 1
                loss, gW, gb = triplet_loss(embed(current, xq), embed(current, xp), embed(current, xn), config.margin), 0.0 * W, 0.0 * b
            gW, gb, _ = clip_gradients(gW, gb, config.grad_clip_norm)
            lr = learning_rate_at(config, step, total)
            W = W - lr * gW
            b = b - lr * gb
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)) if losses else 0.0)
    if skipped:
        log.warning("skipped %d steps with coincident embeddings", skipped)
    return EmbeddingHead(W, b), history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def head_to_dict(head: EmbeddingHead) -> dict:
    return {
        "version": 1,
        "d_in": head.d_in,
        "d_out": head.d_out,
        "weight": [float(v) for v in head.weight.ravel()],
        "bias": [float(v) for v in head.bias],
    }


def head_from_dict(data) -> EmbeddingHead:
    try:
        if data["version"] != 1:
            raise SchemaViolation(f"unsupported head version {data['version']}")
        d_in, d_out = int(data["d_in"]), int(data["d_out"])
        W = np.array(data["weight"], dtype=float)
        if W.size != d_in * d_out or len(data["bias"]) != d_out:
            raise SchemaViolation("head weight/bias sizes do not match d_in/d_out")
        return EmbeddingHead(W.reshape(d_out, d_in), data["bias"])
    except (KeyError, TypeError) as exc:
        raise SchemaViolation(f"malformed head checkpoint: {exc}") from exc


def save_head(head: EmbeddingHead, path):
    try:
        Path(path).write_text(json.dumps(head_to_dict(head)) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_head(path) -> EmbeddingHead:
    try:
        return head_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
