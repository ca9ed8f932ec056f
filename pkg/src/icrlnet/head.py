"""Cosine classifier and the three-term training objective.

Logits are temperature-scaled cosine similarities between unit-norm query
vectors and normalized class vectors.  The raw cosine lives in [-1,1],
which makes the softmax nearly uniform, so a scale tau (default 10) is
applied; tau=1 recovers the unscaled form.

The objective combines
  * cls:   cross-entropy of query logits against query labels,
  * intra: cross-entropy of the support instances against the same class
           vectors (pulls instances toward their own class),
  * inter: sum over ordered pairs i != j of normalized class-vector dot
           products (pushes distinct classes apart; N*(N-1) terms),
as joint = cls + lambda1 * intra + lambda2 * inter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor

DEFAULT_TAU = 10.0
DEFAULT_LAMBDA1 = 0.1
DEFAULT_LAMBDA2 = 0.1


def _check_class_norms(class_reps: Tensor, eps: float) -> None:
    norms = np.sqrt((class_reps.data ** 2).sum(axis=-1))
    bad = np.nonzero(norms <= eps)[0]
    if bad.size:
        raise ContractViolation(f"class representation {int(bad[0])} has zero norm")


def cosine_logits(query_reps: Tensor, class_reps: Tensor, tau: float = DEFAULT_TAU,
                  eps: float = 1e-12) -> Tensor:
    """(Q,d) queries x (N,d) class vectors -> (Q,N) scaled cosine logits.

    Class vectors are normalized here, so any positive rescaling of a class
    vector leaves the logits unchanged.  Queries are expected unit-norm
    already (the extractor ends in L2 normalization).
    """
    if query_reps.ndim != 2 or class_reps.ndim != 2:
        raise ContractViolation("cosine_logits expects matrices (Q,d) and (N,d)")
    if query_reps.shape[1] != class_reps.shape[1]:
        raise ContractViolation(
            f"feature dims differ: {query_reps.shape[1]} vs {class_reps.shape[1]}")
    _check_class_norms(class_reps, eps)
    normalized = T.l2_normalize(class_reps, eps)
    sims = T.matmul(query_reps, T.transpose(normalized))
    return T.mul(sims, float(tau))


def predict(logits: Tensor | np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-1)


def loss_cls(logits: Tensor, labels) -> Tensor:
    """Mean query cross-entropy."""
    return T.softmax_cross_entropy(logits, labels)


def loss_intra(support_reps: Tensor, class_reps: Tensor, support_labels,
               tau: float = DEFAULT_TAU, eps: float = 1e-12) -> Tensor:
    """Support instances classified against their own class vectors."""
    logits = cosine_logits(support_reps, class_reps, tau, eps)
    return T.softmax_cross_entropy(logits, support_labels)


def loss_inter(class_reps: Tensor, eps: float = 1e-12) -> Tensor:
    """Sum of normalized dot products over ordered pairs of distinct classes.

    Zero for mutually orthogonal vectors; N*(N-1) when all N coincide.
    """
    _check_class_norms(class_reps, eps)
    n = class_reps.shape[0]
    normalized = T.l2_normalize(class_reps, eps)
    gram = T.matmul(normalized, T.transpose(normalized))
    off_diagonal = Tensor(1.0 - np.eye(n, dtype=np.float32))
    return T.reduce_sum(T.hadamard(gram, off_diagonal))


@dataclass
class LossBreakdown:
    """Scalar record of one episode's objective.

    ``joint`` is recomputed in float64 from the three measured terms, so the
    identity joint = cls + lambda1*intra + lambda2*inter holds exactly in
    the logs even though the training graph accumulates in float32.
    """
    cls: float
    intra: float
    inter: float
    joint: float
    lambda1: float
    lambda2: float


def loss_joint(l_cls: Tensor, l_intra: Tensor | None, l_inter: Tensor | None,
               lambda1: float = DEFAULT_LAMBDA1,
               lambda2: float = DEFAULT_LAMBDA2) -> tuple[Tensor, LossBreakdown]:
    """Combine the terms into the optimization target plus a scalar record.

    A term passed as None (ablation) contributes nothing and its effective
    lambda is zero.  Coefficients must be non-negative.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ContractViolation("loss coefficients must be non-negative")
    eff1 = lambda1 if l_intra is not None else 0.0
    eff2 = lambda2 if l_inter is not None else 0.0
    total = l_cls
    if l_intra is not None and lambda1 > 0:
        total = T.add(total, T.mul(l_intra, lambda1))
    if l_inter is not None and lambda2 > 0:
        total = T.add(total, T.mul(l_inter, lambda2))
    cls_v = float(l_cls.item())
    intra_v = float(l_intra.item()) if l_intra is not None else 0.0
    inter_v = float(l_inter.item()) if l_inter is not None else 0.0
    joint_v = cls_v + eff1 * intra_v + eff2 * inter_v
    return total, LossBreakdown(cls_v, intra_v, inter_v, joint_v, eff1, eff2)
