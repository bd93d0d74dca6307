"""Linear pair classifier over frozen image embeddings.

A pair's feature is [later ; earlier ; later - earlier]; a single linear
layer plus sigmoid turns it into a change probability. Training is plain
mini-batch Adam with global-norm gradient clipping and uniform averaging
of the last epochs' weight snapshots. With the backbone frozen the problem
is convex, so the head starts from zeros and the trajectory is fully
determined by the shuffle seed.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingProvider
from .errors import DataFormatError
from .fileio import atomic_write_text
from .timeseries import PairSample

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

FEATURE_ORDERS = ("later_first", "earlier_first")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    grad_clip_norm: float = 0.5
    weight_average_tail: float = 0.25
    seed: int = 0
    class_threshold: float = 0.5
    feature_order: str = "later_first"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.grad_clip_norm <= 0:
            raise ValueError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if not 0.0 <= self.weight_average_tail <= 1.0:
            raise ValueError(f"weight_average_tail must be in [0, 1], got {self.weight_average_tail}")
        if not 0.0 < self.class_threshold < 1.0:
            raise ValueError(f"class_threshold must be in (0, 1), got {self.class_threshold}")
        if self.feature_order not in FEATURE_ORDERS:
            raise ValueError(f"feature_order must be one of {FEATURE_ORDERS}, got {self.feature_order!r}")


@dataclass(frozen=True)
class LinearHead:
    weights: np.ndarray  # length 3*d, float64
    bias: float

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("weights must be 1-D")
        if not (np.all(np.isfinite(w)) and math.isfinite(self.bias)):
            raise ValueError("head has non-finite entries")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def zeros(cls, feature_dim: int) -> "LinearHead":
        return cls(np.zeros(feature_dim), 0.0)


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision_degenerate: bool = False
    recall_degenerate: bool = False


def build_feature(h_later: np.ndarray, h_earlier: np.ndarray) -> np.ndarray:
    """Concatenate [later ; earlier ; later - earlier] into one float64 vector."""
    hl = np.asarray(h_later, dtype=np.float64)
    he = np.asarray(h_earlier, dtype=np.float64)
    if hl.shape != he.shape or hl.ndim != 1:
        raise ValueError(f"embedding shapes disagree: {hl.shape} vs {he.shape}")
    return np.concatenate([hl, he, hl - he])


def pair_feature_matrix(
    pairs: list[PairSample],
    provider: EmbeddingProvider,
    order: str = "later_first",
) -> tuple[np.ndarray, np.ndarray]:
    """Stack pair features into X (m x 3d) and labels into y (m,).

    ``order`` flips which image feeds the first block (and the sign of the
    difference block); the default matches chronological later-first.
    """
    if order not in FEATURE_ORDERS:
        raise ValueError(f"order must be one of {FEATURE_ORDERS}, got {order!r}")
    feats = []
    y = np.empty(len(pairs))
    for i, p in enumerate(pairs):
        hl = provider.get(p.later_id)
        he = provider.get(p.earlier_id)
        feats.append(build_feature(hl, he) if order == "later_first" else build_feature(he, hl))
        y[i] = p.label
    X = np.vstack(feats) if feats else np.empty((0, 3 * provider.dim))
    return X, y


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict(head: LinearHead, feature: np.ndarray) -> float:
    """Change probability sigmoid(w.x + b) for one pair feature."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != head.weights.shape:
        raise ValueError(f"feature length {feature.shape} does not match head {head.weights.shape}")
    return float(_sigmoid(np.array([feature @ head.weights + head.bias]))[0])


def predict_batch(head: LinearHead, X: np.ndarray) -> np.ndarray:
    if X.shape[1] != head.weights.size:
        raise ValueError(f"feature dim {X.shape[1]} does not match head dim {head.weights.size}")
    return _sigmoid(X @ head.weights + head.bias)


def loss_and_grad(
    head: LinearHead, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy and its gradient wrt (weights, bias).

    Probabilities are clamped to [1e-12, 1-1e-12] inside the logs only; the
    gradient stays the exact analytic mean[(p - y) x].
    """
    if len(y) == 0:
        raise ValueError("empty batch")
    p = predict_batch(head, X)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -float(np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    resid = p - y
    grad_w = X.T @ resid / len(y)
    grad_b = float(np.mean(resid))
    return loss, grad_w, grad_b


def clip_gradient(grad_w: np.ndarray, grad_b: float, max_norm: float) -> tuple[np.ndarray, float]:
    """Rescale so the global L2 norm over weights and bias is <= max_norm."""
    norm = math.sqrt(float(grad_w @ grad_w) + grad_b * grad_b)
    if norm > max_norm:
        scale = max_norm / norm
        return grad_w * scale, grad_b * scale
    return grad_w, grad_b


@dataclass
class TrainLogRow:
    epoch: int
    loss: float
    val_accuracy: float | None


@dataclass
class TrainResult:
    head: LinearHead
    log: list[TrainLogRow] = field(default_factory=list)


def train(
    pairs: list[PairSample],
    provider: EmbeddingProvider,
    config: TrainConfig,
    val_pairs: list[PairSample] | None = None,
) -> TrainResult:
    """Fit the linear head; deterministic for a fixed config seed.

    The returned head is the plain average of epoch-end snapshots over the
    final weight_average_tail fraction of epochs (at least the last one).
    """
    if not pairs:
        raise ValueError("no training pairs")
    X, y = pair_feature_matrix(pairs, provider, config.feature_order)
    labels = set(int(v) for v in y)
    if labels != {0, 1}:
        logger.warning("training pairs contain a single label class %s", sorted(labels))
    feature_dim = X.shape[1]
    w = np.zeros(feature_dim)
    b = 0.0
    if config.epochs == 0:
        return TrainResult(LinearHead(w, b))

    val_X: np.ndarray | None = None
    val_y: np.ndarray | None = None
    if val_pairs:
        val_X, val_y = pair_feature_matrix(val_pairs, provider, config.feature_order)

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m_w = np.zeros(feature_dim)
    v_w = np.zeros(feature_dim)
    m_b = v_b = 0.0
    step = 0
    rng = np.random.default_rng(config.seed)
    snapshots: list[tuple[np.ndarray, float]] = []
    log: list[TrainLogRow] = []

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(y))
        epoch_losses = []
        for start in range(0, len(y), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, g_w, g_b = loss_and_grad(LinearHead(w, b), X[idx], y[idx])
            g_w, g_b = clip_gradient(g_w, g_b, config.grad_clip_norm)
            step += 1
            m_w = beta1 * m_w + (1 - beta1) * g_w
            v_w = beta2 * v_w + (1 - beta2) * g_w * g_w
            m_b = beta1 * m_b + (1 - beta1) * g_b
            v_b = beta2 * v_b + (1 - beta2) * g_b * g_b
            bc1 = 1 - beta1 ** step
            bc2 = 1 - beta2 ** step
            w = w - config.learning_rate * (m_w / bc1) / (np.sqrt(v_w / bc2) + eps)
            b = b - config.learning_rate * (m_b / bc1) / (math.sqrt(v_b / bc2) + eps)
            epoch_losses.append(loss)
        snapshots.append((w.copy(), b))
        val_acc = None
        if val_X is not None and len(val_y) > 0:
            preds = predict_batch(LinearHead(w, b), val_X) >= config.class_threshold
            val_acc = float(np.mean(preds == (val_y == 1)))
        log.append(TrainLogRow(epoch, float(np.mean(epoch_losses)), val_acc))

    tail = max(1, math.ceil(config.weight_average_tail * config.epochs))
    tail_snaps = snapshots[-tail:]
    avg_w = np.mean([s[0] for s in tail_snaps], axis=0)
    avg_b = float(np.mean([s[1] for s in tail_snaps]))
    return TrainResult(LinearHead(avg_w, avg_b), log)


def evaluate(
    head: LinearHead,
    pairs: list[PairSample],
    provider: EmbeddingProvider,
    threshold: float = 0.5,
    order: str = "later_first",
) -> EvalMetrics:
    """Confusion counts and derived metrics; change (label 1) is the positive class.

    Precision/recall fall back to 0 with a degenerate flag when their
    denominator is empty.
    """
    if not pairs:
        raise ValueError("cannot evaluate on an empty pair list")
    X, y = pair_feature_matrix(pairs, provider, order)
    preds = predict_batch(head, X) >= threshold
    actual = y == 1
    tp = int(np.sum(preds & actual))
    fp = int(np.sum(preds & ~actual))
    tn = int(np.sum(~preds & ~actual))
    fn = int(np.sum(~preds & actual))
    precision_degenerate = (tp + fp) == 0
    recall_degenerate = (tp + fn) == 0
    precision = 0.0 if precision_degenerate else tp / (tp + fp)
    recall = 0.0 if recall_degenerate else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return EvalMetrics(
        accuracy=(tp + tn) / len(pairs),
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp, fp=fp, tn=tn, fn=fn,
        precision_degenerate=precision_degenerate,
        recall_degenerate=recall_degenerate,
    )


# --- serialization -----------------------------------------------------------

def _trained_at() -> str | None:
    # Reproducible-build convention: only stamp a time when SOURCE_DATE_EPOCH
    # is set, so identical runs emit identical bytes by default.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()


def save_head(
    head: LinearHead,
    path: str | Path,
    threshold: float = 0.5,
    config_digest: str = "",
) -> None:
    doc = {
        "dim": int(head.weights.size),
        "weights": [float(v) for v in head.weights],
        "bias": head.bias,
        "threshold": threshold,
        "trained_at": _trained_at(),
        "config_digest": config_digest,
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def load_head(path: str | Path) -> tuple[LinearHead, float]:
    """Read a serialized head; returns (head, threshold)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid head JSON: {exc}") from exc
    try:
        weights = np.asarray(doc["weights"], dtype=np.float64)
        if weights.size != int(doc["dim"]):
            raise DataFormatError(f"{path}: dim {doc['dim']} does not match {weights.size} weights")
        return LinearHead(weights, float(doc["bias"])), float(doc["threshold"])
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed head document: {exc!r}") from exc


def write_train_log(log: list[TrainLogRow], path: str | Path) -> None:
    lines = ["epoch,loss,val_accuracy"]
    for row in log:
        val = "" if row.val_accuracy is None else repr(row.val_accuracy)
        lines.append(f"{row.epoch},{row.loss!r},{val}")
    atomic_write_text(path, "\n".join(lines) + "\n")
