"""Adaptive instance revaluing: per-instance significance weights over a
K-shot support set, and the weighted class representation built from them.

Each of the K support representations is reduced to its coordinate mean
(the summary statistic), the resulting K-vector goes through a two-layer
MLP (ReLU hidden, sigmoid out), and the class representation is the
significance-weighted sum of the instance vectors.  No re-normalization
happens here; the cosine classifier normalizes class vectors itself, so
any positive rescaling of the output leaves predictions unchanged.

Note the MLP is dense over support slots: it is NOT permutation-invariant
in the support order.  Weights are tied to one K, so a trained model only
accepts episodes with the same shot count.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor


def hidden_width(k: int, requested: int = 0) -> int:
    """Default MLP hidden width: 4*K, floored at 4."""
    return requested if requested > 0 else max(4, 4 * k)


def init_airn(k: int, hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    if k < 1:
        raise ContractViolation("support size K must be >= 1")

    def uniform(rows, cols):
        limit = 1.0 / np.sqrt(cols)
        return Tensor(rng.uniform(-limit, limit, size=(rows, cols)).astype(np.float32),
                      requires_grad=True)

    return {
        "airn.w3": uniform(hidden, k),
        "airn.b3": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        "airn.w4": uniform(k, hidden),
        "airn.b4": Tensor(np.zeros(k, dtype=np.float32), requires_grad=True),
    }


def zero_init_airn(k: int, hidden: int) -> dict[str, Tensor]:
    """All-zero weights: every significance is exactly sigmoid(0) = 0.5."""
    return {
        "airn.w3": Tensor(np.zeros((hidden, k), dtype=np.float32), requires_grad=True),
        "airn.b3": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        "airn.w4": Tensor(np.zeros((k, hidden), dtype=np.float32), requires_grad=True),
        "airn.b4": Tensor(np.zeros(k, dtype=np.float32), requires_grad=True),
    }


def summarize(u: Tensor) -> Tensor:
    """Summary statistic per instance: (K,d) -> (K,) of coordinate means."""
    if u.ndim != 2 or u.shape[0] < 1:
        raise ContractViolation(f"expected a (K,d) stack of representations, got {u.shape}")
    return T.reduce_mean(u, axis=1)


def weigh(params: dict[str, Tensor], v: Tensor) -> Tensor:
    """Significance vector sigmoid(w4 @ relu(w3 @ v + b3) + b4), in (0,1)^K."""
    k = params["airn.w3"].shape[1]
    if v.shape != (k,):
        raise ContractViolation(f"summary length {v.shape} does not match K={k}")
    hidden = T.relu(T.add(T.matmul(params["airn.w3"], v), params["airn.b3"]))
    return T.sigmoid(T.add(T.matmul(params["airn.w4"], hidden), params["airn.b4"]))


def combine(a: Tensor, u: Tensor) -> Tensor:
    """Weighted sum of instance vectors: sum_k a_k * u_k, shape (d,)."""
    if a.shape != (u.shape[0],):
        raise ContractViolation(f"weights {a.shape} vs {u.shape[0]} instances")
    return T.matmul(T.transpose(u), a)


def class_representation(params: dict[str, Tensor], u: Tensor) -> tuple[Tensor, Tensor]:
    """Full pipeline for one class: (K,d) support stack -> (c, significances)."""
    if u.shape[0] < 1:
        raise ContractViolation("empty support set")
    a = weigh(params, summarize(u))
    return combine(a, u), a


def mean_class_representation(u: Tensor) -> Tensor:
    """Averaging baseline: plain mean of the support stack, shape (d,)."""
    return T.reduce_mean(u, axis=0)
