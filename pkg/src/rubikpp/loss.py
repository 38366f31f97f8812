"""Restoration objectives, segmentation metrics and the paired t-test.

Expectations are realised as arithmetic means over voxels, channels and
batch (or over patches for discriminator maps).  Every loss that takes part
in training has a matching ``*_grad`` returning the gradient with respect to
its prediction-side argument.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence

import numpy as np
from scipy.special import betainc

from .errors import RubikError, ShapeError
from .volume import Volume

EPS = 1e-7
ADV_MODES = ("nonsaturating", "minimax")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0
    adversarial: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.adversarial < 0:
            raise RubikError("loss weights must be >= 0")


@dataclass
class LossReport:
    l1: float
    l2: float
    adv_d: float
    adv_g: float
    joint: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _pair(a, b):
    a = a.data if isinstance(a, Volume) else np.asarray(a)
    b = b.data if isinstance(b, Volume) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError()
    return a, b


def l1_loss(y, g) -> float:
    y, g = _pair(y, g)
    return float(np.mean(np.abs(y.astype(np.float64) - g)))


def l1_grad(y, g) -> np.ndarray:
    """d l1_loss / d g."""
    y, g = _pair(y, g)
    return (np.sign(g - y) / g.size).astype(g.dtype)


def l2_loss(y, g) -> float:
    y, g = _pair(y, g)
    return float(np.mean((y.astype(np.float64) - g) ** 2))


mse = l2_loss


def l2_grad(y, g) -> np.ndarray:
    """d l2_loss / d g."""
    y, g = _pair(y, g)
    return (2.0 * (g - y) / g.size).astype(g.dtype)


def _clamp(d):
    return np.clip(np.asarray(d, dtype=np.float64), EPS, 1.0 - EPS)


def adv_loss_d(d_real, d_fake) -> float:
    """``mean log D(x, y) + mean log(1 - D(x, G(x)))``; the discriminator maximises it."""
    d_real, d_fake = _pair(d_real, d_fake)
    return float(np.mean(np.log(_clamp(d_real))) + np.mean(np.log(1.0 - _clamp(d_fake))))


def adv_loss_d_grads(d_real, d_fake):
    """Gradients of ``adv_loss_d`` w.r.t. ``d_real`` and ``d_fake``."""
    d_real, d_fake = _pair(d_real, d_fake)
    live_r = (d_real > EPS) & (d_real < 1 - EPS)
    live_f = (d_fake > EPS) & (d_fake < 1 - EPS)
    g_real = np.where(live_r, 1.0 / _clamp(d_real), 0.0) / d_real.size
    g_fake = np.where(live_f, -1.0 / (1.0 - _clamp(d_fake)), 0.0) / d_fake.size
    return g_real.astype(d_real.dtype), g_fake.astype(d_fake.dtype)


def adv_loss_g(d_fake, mode: str = "nonsaturating") -> float:
    """Generator adversarial term, to be minimised.

    ``minimax`` is ``mean log(1 - D(x, G(x)))`` exactly as in the joint
    min-max objective; ``nonsaturating`` is the usual ``mean -log D(x, G(x))``.
    """
    d = _clamp(d_fake)
    if mode == "minimax":
        return float(np.mean(np.log(1.0 - d)))
    if mode == "nonsaturating":
        return float(np.mean(-np.log(d)))
    raise RubikError(f"bad mode: {mode!r}")


def adv_loss_g_grad(d_fake, mode: str = "nonsaturating") -> np.ndarray:
    d_fake = np.asarray(d_fake)
    live = (d_fake > EPS) & (d_fake < 1 - EPS)
    d = _clamp(d_fake)
    if mode == "minimax":
        g = -1.0 / (1.0 - d)
    elif mode == "nonsaturating":
        g = -1.0 / d
    else:
        raise RubikError(f"bad mode: {mode!r}")
    return (np.where(live, g, 0.0) / d_fake.size).astype(d_fake.dtype)


def joint_generator_objective(l1: float, adv_g: float, weights: LossWeights = LossWeights()) -> float:
    return weights.adversarial * adv_g + weights.lam * l1


# --- evaluation ------------------------------------------------------------

def dice(pred_mask, gt_mask) -> float:
    """Dice overlap of two binary masks; two empty masks score 1.0."""
    p, g = _pair(pred_mask, gt_mask)
    p = p.astype(bool)
    g = g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def per_class_dice(pred_labels, gt_labels, num_classes: int) -> list:
    """Dice per foreground class ``1 .. num_classes - 1``."""
    p, g = _pair(pred_labels, gt_labels)
    for arr in (p, g):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise RubikError("bad label")
    return [dice(p == k, g == k) for k in range(1, num_classes)]


def mean_dice(pred_labels, gt_labels, num_classes: int) -> float:
    scores = per_class_dice(pred_labels, gt_labels, num_classes)
    if not scores:
        raise RubikError("bad label: need at least one foreground class")
    return float(np.mean(scores))


def student_t_sf2(t: float, df: int) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError()
    if a.size < 2:
        raise RubikError("degenerate test: need at least two pairs")
    return paired_t_statistic(a, b)[1]


def paired_t_statistic(a, b):
    """Returns ``(t, p, df)``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    k = d.size
    sd = d.std(ddof=1)
    if not sd > 0:
        raise RubikError("degenerate test: zero variance of differences")
    t = d.mean() / (sd / math.sqrt(k))
    return float(t), student_t_sf2(t, k - 1), k - 1


def _voxel_weights(labels, weights):
    if weights is None:
        return None
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or np.any(weights < 0):
        raise RubikError("class weights must be a non-negative vector")
    if labels.size and labels.max() >= weights.size:
        raise RubikError("bad label: class without a weight")
    return weights[labels]


def cross_entropy(logits, labels, weights=None) -> float:
    """Voxel-wise softmax cross-entropy; ``logits`` is ``(N, K, ...)``.

    Without ``weights`` this is the plain mean.  With per-class ``weights`` it
    is ``sum w[y] * -log p[y] / sum w[y]``.
    """
    logp = _log_softmax(logits)
    labels = np.asarray(labels)
    if labels.shape != logp.shape[:1] + logp.shape[2:]:
        raise ShapeError()
    picked = np.take_along_axis(logp, labels[:, None].astype(np.intp), axis=1)[:, 0]
    w = _voxel_weights(labels, weights)
    if w is None:
        return float(-picked.mean())
    return float(-(w * picked).sum() / w.sum())


def cross_entropy_grad(logits, labels, weights=None) -> np.ndarray:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    probs = np.exp(_log_softmax(logits))
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
    w = _voxel_weights(labels, weights)
    if w is None:
        count = probs.size // probs.shape[1]
        return ((probs - onehot) / count).astype(logits.dtype)
    return (w[:, None] * (probs - onehot) / w.sum()).astype(logits.dtype)


def balanced_class_weights(label_arrays, num_classes: int) -> np.ndarray:
    """Inverse-frequency class weights normalised to mean 1; absent classes get weight 0."""
    counts = np.zeros(num_classes)
    for lab in label_arrays:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    weights = np.where(counts > 0, counts.sum() / np.maximum(counts, 1), 0.0)
    return weights * (np.count_nonzero(weights) / weights.sum())


def _log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
