"""Task and distillation losses.

Embeddings ``(batch, p, dim)`` are flattened to ``(batch, p*dim)`` before any
distance is taken; every distance here is the plain Euclidean one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DimensionError, UsageError
from .tensor import Tensor


def _flat(x) -> Tensor:
    x = tn.as_tensor(x)
    return x.reshape(x.shape[0], -1) if x.ndim != 2 else x


def triplet_loss(x, labels, margin: float = 0.2) -> Tensor:
    """Batch-all triplet loss averaged over the triplets with a positive hinge.

    When every hinge is zero the loss is an exact zero that still carries a
    (zero) gradient path.
    """
    labels = np.asarray(labels)
    x = _flat(x)
    n = x.shape[0]
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    a, p, q = np.nonzero(pos[:, :, None] & neg[:, None, :])
    if a.size == 0:
        raise UsageError("batch has no valid (anchor, positive, negative) triplet")
    d = tn.pairwise_distance(x)
    ap = tn.take(d, a * n + p)
    an = tn.take(d, a * n + q)
    hinge = tn.relu(ap - an + margin)
    active = int((hinge.data > 0).sum())
    return hinge.sum() / max(active, 1)


def triplet_terms_bruteforce(x: np.ndarray, labels, margin: float = 0.2) -> list[float]:
    """Every hinge term by explicit enumeration (reference for tests)."""
    x = np.asarray(x, dtype=np.float64).reshape(len(labels), -1)
    labels = list(labels)
    terms = []
    for a in range(len(labels)):
        for p in range(len(labels)):
            for q in range(len(labels)):
                if p != a and labels[p] == labels[a] and labels[q] != labels[a]:
                    dap = np.sqrt(((x[a] - x[p]) ** 2).sum())
                    daq = np.sqrt(((x[a] - x[q]) ** 2).sum())
                    terms.append(max(0.0, dap - daq + margin))
    return terms


def softmax_ce(logits, labels) -> Tensor:
    """Mean over batch and parts of ``-log softmax(logits)[label]``."""
    o = tn.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if o.ndim == 2:
        o = o.reshape(o.shape[0], 1, o.shape[1])
    b, p, c = o.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= c:
        raise DimensionError("labels must be one class index per sample")
    logp = tn.log_softmax(o, axis=-1)
    idx = (np.arange(b)[:, None] * p + np.arange(p)[None, :]) * c + labels[:, None]
    return -tn.take(logp, idx.ravel()).mean()


def softmax_np(o: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    z = o / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def kd_kl(teacher_logits, student_logits, temperature: float = 1.0) -> Tensor:
    """KL(q(O_H/T) || q(O_L/T)) over the class axis, averaged over the other axes.

    The teacher side is a constant.
    """
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    oh = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    ol = tn.as_tensor(student_logits)
    if oh.shape != ol.shape:
        raise DimensionError(f"teacher {oh.shape} and student {ol.shape} logits differ in shape")
    qh = softmax_np(oh, temperature)
    log_qh = np.log(qh)
    log_ql = tn.log_softmax(ol / temperature, axis=-1)
    rows = int(np.prod(oh.shape[:-1]))
    # sum_i qh (log qh - log ql), averaged over rows
    const = float((qh * log_qh).sum())
    return (const - (log_ql * qh).sum()) / rows


def logits_variance(logits) -> float:
    o = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return float(o.var())


# ---------------------------------------------------------------------------
# inter-class distance calibration


@dataclass(frozen=True)
class PairProbability:
    anchor: int
    candidate: int
    q: float


def _interclass_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise UsageError("inter-class probabilities need at least two distinct labels")
    return labels[:, None] != labels[None, :]


def idc_log_probs(x, labels) -> Tensor:
    """Row-wise log q*: log-softmax of negative distances over different-label candidates."""
    mask = _interclass_mask(labels)
    d = tn.pairwise_distance(_flat(x))
    return tn.log_softmax(-d, axis=1, mask=mask)


def idc_probabilities(x, labels) -> list[PairProbability]:
    mask = _interclass_mask(labels)
    with tn.no_grad():
        lp = idc_log_probs(tn.as_tensor(x).detach(), labels).data
    q = np.exp(lp)
    return [PairProbability(int(r), int(s), float(q[r, s])) for r, s in zip(*np.nonzero(mask))]


def idc_probability_matrix(x, labels) -> np.ndarray:
    mask = _interclass_mask(labels)
    with tn.no_grad():
        lp = idc_log_probs(tn.as_tensor(x).detach(), labels).data
    return np.where(mask, np.exp(lp), 0.0)


def idc_loss(teacher_x, student_x, labels) -> Tensor:
    """KL between teacher and student inter-class distance distributions, averaged over anchors.

    Gradient flows to the student embeddings only.
    """
    xh = teacher_x.data if isinstance(teacher_x, Tensor) else np.asarray(teacher_x, dtype=np.float64)
    xl = tn.as_tensor(student_x)
    if xh.shape != xl.shape:
        raise UsageError(f"teacher {xh.shape} and student {xl.shape} batches differ")
    labels = np.asarray(labels)
    if labels.shape[0] != xh.shape[0]:
        raise UsageError("one label per sample required")
    mask = _interclass_mask(labels)
    anchors = int(mask.any(axis=1).sum())
    with tn.no_grad():
        log_qh = idc_log_probs(Tensor(xh), labels).data
    qh = np.where(mask, np.exp(log_qh), 0.0)
    log_ql = idc_log_probs(xl, labels)
    const = float((qh * log_qh).sum())
    return (const - (log_ql * qh).sum()) / anchors


@dataclass
class LossWeights:
    triplet: float = 1.0
    ce: float = 1.0
    idc: float = 0.0
    kd: float = 0.0
    margin: float = 0.2
    temperature: float = 1.0
