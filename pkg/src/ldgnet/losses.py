"""Classification, supervised-contrastive and visual-linguistic alignment losses.

Similarities are inner products of unit-norm features multiplied by a learned
logit scale ``exp(theta)``.  Contrastive terms are averaged over the anchors
that have at least one positive, so magnitudes do not grow with batch size.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

INIT_LOG_SCALE = math.log(1.0 / 0.07)
MAX_LOG_SCALE = math.log(100.0)


class NoPositivesWarning(UserWarning):
    """No anchor in the batch had a positive; the loss is 0."""


class Temperature:
    """Learnable log logit scale; ``scale = exp(theta)`` and ``tau = 1 / scale``."""

    def __init__(self, theta: float = INIT_LOG_SCALE):
        self.theta = Tensor(np.array(theta), requires_grad=True)

    def scale(self) -> Tensor:
        return nd.exp(self.theta)

    @property
    def tau(self) -> float:
        return math.exp(-float(self.theta.data))

    def clamp(self) -> None:
        """Keep the scale within [1, 100]; call after each optimiser update."""
        self.theta.data = np.clip(self.theta.data, 0.0, MAX_LOG_SCALE)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def cross_entropy(probs, label: int) -> Tensor:
    """-log p[label] for a single probability vector."""
    p = nd.as_tensor(probs)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} outside {p.shape[-1]} classes")
    return -nd.log(p[label])


def cross_entropy_logits(logits, labels) -> Tensor:
    """Per-sample cross-entropy from logits through a stable log-softmax."""
    logits = nd.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    logp = nd.log_softmax(logits)
    return -logp[np.arange(len(labels)), labels]


def classification_loss_sd(scores, labels, from_logits: bool = True) -> Tensor:
    """Mean cross-entropy over the batch.  ``scores`` are logits by default, or
    probabilities when ``from_logits`` is False."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if from_logits:
        return nd.mean(cross_entropy_logits(scores, labels))
    probs = nd.as_tensor(scores)
    c = probs.shape[-1]
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c})")
    return -nd.mean(nd.log(probs[np.arange(len(labels)), labels]))


# ---------------------------------------------------------------------------
# contrastive machinery
# ---------------------------------------------------------------------------


def _as_scale(scale) -> Tensor:
    return scale if isinstance(scale, Tensor) else Tensor(np.array(float(scale)))


def _anchor_terms(logits: Tensor, pos: np.ndarray, den: np.ndarray) -> tuple[Tensor | None, int]:
    """Sum over anchors (rows) of -(1/|P|) sum_p [logit_p - logsumexp_den].

    Rows without positives are skipped.  Returns (summed loss, anchor count).
    """
    counts = pos.sum(axis=1)
    rows = np.flatnonzero(counts > 0)
    if len(rows) == 0:
        return None, 0
    if not den[rows].any(axis=1).all():
        raise ValueError("an anchor has an empty denominator set (no negatives)")
    sub = logits[rows]
    weights = pos[rows] / counts[rows, None]
    lse = nd.logsumexp(sub, mask=den[rows])
    attract = nd.sum_(nd.mul(sub, weights))
    return nd.add(nd.sum_(lse), -attract), len(rows)


def supcon(features, labels, scale=1.0, negatives_only: bool = False) -> Tensor:
    """Supervised contrastive loss within one set of unit-norm features.

    Positives of anchor i are the other features with its label.  The
    denominator runs over every other feature, or over negatives only when
    ``negatives_only`` is set.
    """
    x = nd.as_tensor(features)
    labels = np.asarray(labels)
    n = x.shape[0]
    if n == 0:
        raise ValueError("supcon needs at least one feature")
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos = same & not_self
    den = ~same if negatives_only else not_self
    logits = nd.mul(nd.matmul(x, nd.transpose(x)), _as_scale(scale))
    total, count = _anchor_terms(logits, pos, den)
    if total is None:
        warnings.warn("supcon: no anchor has a positive", NoPositivesWarning, stacklevel=2)
        return Tensor(np.array(0.0))
    return nd.scale(total, 1.0 / count)


def bidirectional_alignment(
    visual, v_labels, text, t_labels, scale=1.0, negatives_only: bool = False
) -> Tensor:
    """Image-to-text plus text-to-image supervised contrastive alignment.

    Every visual anchor contrasts against all text features and every text
    anchor against all visual features; positives share the anchor's label.
    The result is the mean over all contributing anchors of both directions.
    """
    v, t = nd.as_tensor(visual), nd.as_tensor(text)
    v_labels, t_labels = np.asarray(v_labels), np.asarray(t_labels)
    if v.shape[0] == 0 or t.shape[0] == 0:
        raise ValueError("alignment needs non-empty visual and text sets")
    if v.shape[0] != len(v_labels) or t.shape[0] != len(t_labels):
        raise ValueError("label count does not match feature count")
    s = _as_scale(scale)
    sim = nd.mul(nd.matmul(v, nd.transpose(t)), s)
    pos = v_labels[:, None] == t_labels[None, :]
    den_v = ~pos if negatives_only else np.ones_like(pos)
    i2t, n_v = _anchor_terms(sim, pos, den_v)
    t2i, n_t = _anchor_terms(nd.transpose(sim), pos.T, den_v.T)
    parts = [p for p in (i2t, t2i) if p is not None]
    if not parts:
        return Tensor(np.array(0.0))
    total = parts[0] if len(parts) == 1 else nd.add(parts[0], parts[1])
    return nd.scale(total, 1.0 / (n_v + n_t))


def coarse_alignment(visual, labels, coarse_text, scale=1.0, negatives_only=False) -> Tensor:
    """Alignment with one coarse prompt feature per image."""
    t = nd.as_tensor(coarse_text)
    if t.shape[0] != nd.as_tensor(visual).shape[0]:
        raise ValueError("coarse alignment pairs exactly one text with each image")
    return bidirectional_alignment(visual, labels, t, labels, scale, negatives_only)


def fine_alignment(visual, labels, fine_text, scale=1.0, negatives_only=False) -> Tensor:
    """Alignment with the two fine-text features of each image.

    ``fine_text`` is (n, 2, d_sem) or (2n, d_sem) ordered image by image.
    """
    v = nd.as_tensor(visual)
    t = nd.as_tensor(fine_text)
    n = v.shape[0]
    if t.ndim == 3:
        if t.shape[:2] != (n, 2):
            raise ValueError(f"fine alignment needs 2 texts per image, got {t.shape[:2]}")
        t = nd.reshape(t, (2 * n, t.shape[-1]))
    elif t.shape[0] != 2 * n:
        raise ValueError(f"fine alignment needs 2 texts per image: {t.shape[0]} texts for {n} images")
    labels = np.asarray(labels)
    return bidirectional_alignment(v, labels, t, np.repeat(labels, 2), scale, negatives_only)


def total_loss(l_sd, l_coarse, l_fine, lam: float, alpha: float):
    """L_SD + lam * ((1 - alpha) * L_coarse + alpha * L_fine).

    Accepts floats or tensors; with ``lam == 0`` the alignment terms are not
    touched at all.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if lam == 0:
        return l_sd
    terms = []
    if alpha < 1.0:
        terms.append((1.0 - alpha, l_coarse))
    if alpha > 0.0:
        terms.append((alpha, l_fine))
    if all(not isinstance(x, Tensor) for x in (l_sd, *(t for _, t in terms))):
        return float(l_sd) + lam * sum(w * float(t) for w, t in terms)
    align = None
    for w, t in terms:
        part = nd.scale(nd.as_tensor(t), lam * w)
        align = part if align is None else nd.add(align, part)
    return nd.add(l_sd, align)

