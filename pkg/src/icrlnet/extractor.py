"""Attentional bilinear feature extractor.

Turns a backbone feature map (d,h,w) into a unit-norm instance vector:
two parallel 1x1 convolutions whose outputs are multiplied elementwise,
a sigmoid spatial attention computed from that intermediate, a weighted
spatial sum, and L2 normalization.  The attention weights are plain
sigmoids, deliberately not softmax-normalized over locations.

Pooling variants (ablation switches, selected via ``pooling``):

  full     1x1 pair + attention pooling (the default pipeline)
  model-1  1x1 pair + global average pooling instead of attention
  model-2  1x1 pair, no pooling: the intermediate map is flattened
  model-3  no 1x1 convolutions (intermediate = raw map) + attention
  model-4  single 1x1 convolution: (w1 * map) had-product raw map + attention
  model-5  naive bilinear pooling of the raw map (d x d outer-product
           descriptor, flattened); only for d <= 64
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward
from .tensor import ContractViolation, Tensor

POOLING_VARIANTS = ("full", "model-1", "model-2", "model-3", "model-4", "model-5")

_HAS_PAIR = {"full": True, "model-1": True, "model-2": True,
             "model-3": False, "model-4": False, "model-5": False}
_HAS_SINGLE = {"model-4": True}
_HAS_ATTENTION = {"full": True, "model-3": True, "model-4": True}


def feature_dim(cfg: BackboneConfig, pooling: str) -> int:
    """Length of the instance representation produced by a variant."""
    d, h, w = cfg.feature_shape
    if pooling == "model-2":
        return d * h * w
    if pooling == "model-5":
        return d * d
    return d


def init_extractor(cfg: BackboneConfig, pooling: str,
                   rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in scaled kernels, zero biases.

    The two parallel 1x1 projections start from the SAME draw, so the
    initial intermediate map is an exact square (w1*f)^2 and therefore
    non-negative.  That keeps the pooled representation's coordinate mean
    (the revaluing network's summary statistic) well away from zero at the
    start of training; independent draws make the products sign-symmetric
    and collapse that statistic by more than an order of magnitude.
    Training is free to decouple the two streams.
    """
    if pooling not in POOLING_VARIANTS:
        raise ContractViolation(f"unknown pooling variant {pooling!r}")
    d = cfg.channels
    if pooling == "model-5" and d > 64:
        raise ContractViolation(f"model-5 descriptor is {d}x{d}; limited to d <= 64")
    std = np.sqrt(2.0 / d)
    params: dict[str, Tensor] = {}

    def conv1x1(c_out):
        return Tensor((rng.standard_normal((c_out, d, 1, 1)) * std).astype(np.float32),
                      requires_grad=True)

    if _HAS_PAIR.get(pooling, False) or _HAS_SINGLE.get(pooling, False):
        params["abfe.w1"] = conv1x1(d)
        params["abfe.b1"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    if _HAS_PAIR.get(pooling, False):
        params["abfe.w2"] = Tensor(params["abfe.w1"].data.copy(), requires_grad=True)
        params["abfe.b2"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    if _HAS_ATTENTION.get(pooling, False):
        params["abfe.ws"] = conv1x1(1)
        params["abfe.bs"] = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    return params


def bilinear_intermediate(params: dict[str, Tensor], fm: Tensor,
                          pooling: str = "full") -> Tensor:
    """Hadamard product of the two 1x1-projected maps (variant-aware)."""
    if pooling in ("model-3", "model-5"):
        return fm
    f1 = T.conv2d(fm, params["abfe.w1"], params["abfe.b1"])
    if pooling == "model-4":
        return T.hadamard(f1, fm)
    f2 = T.conv2d(fm, params["abfe.w2"], params["abfe.b2"])
    return T.hadamard(f1, f2)


def _as_batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 3:
        return T.reshape(t, (1,) + t.shape), True
    return t, False


def attention_pool(params: dict[str, Tensor], inter: Tensor) -> Tensor:
    """Sigmoid spatial weights from a 1x1 conv, then a weighted spatial sum.

    (d,h,w) -> (d,); batched (B,d,h,w) -> (B,d).  The weights lie strictly
    in (0,1) and are not normalized across locations.
    """
    x, single = _as_batched(inter)
    b, d, h, w = x.shape
    logits = T.conv2d(x, params["abfe.ws"], params["abfe.bs"])   # (B,1,h,w)
    weights = T.sigmoid(T.reshape(logits, (b, h * w, 1)))
    pooled = T.matmul(T.reshape(x, (b, d, h * w)), weights)      # (B,d,1)
    pooled = T.reshape(pooled, (b, d))
    return T.reshape(pooled, (d,)) if single else pooled


def attention_weights(params: dict[str, Tensor], inter: Tensor) -> np.ndarray:
    """Spatial attention values as plain numbers (for inspection)."""
    with T.no_grad():
        x, single = _as_batched(inter)
        b, _, h, w = x.shape
        logits = T.conv2d(x, params["abfe.ws"], params["abfe.bs"])
        a = T.sigmoid(T.reshape(logits, (b, h, w))).data
    return a[0] if single else a


def _pool(params: dict[str, Tensor], inter: Tensor, pooling: str) -> Tensor:
    x, single = _as_batched(inter)
    b, d, h, w = x.shape
    if pooling in ("full", "model-3", "model-4"):
        pooled = attention_pool(params, x)
    elif pooling == "model-1":
        pooled = T.reduce_mean(T.reshape(x, (b, d, h * w)), axis=2)
    elif pooling == "model-2":
        pooled = T.reshape(x, (b, d * h * w))
    elif pooling == "model-5":
        if d > 64:
            raise ContractViolation(f"model-5 descriptor is {d}x{d}; limited to d <= 64")
        mat = T.reshape(x, (b, d, h * w))
        gram = T.matmul(mat, T.permute(mat, (0, 2, 1)))
        pooled = T.reshape(gram, (b, d * d))
    else:
        raise ContractViolation(f"unknown pooling variant {pooling!r}")
    return T.reshape(pooled, pooled.shape[1:]) if single else pooled


def pool_features(params: dict[str, Tensor], inter: Tensor, pooling: str = "full") -> Tensor:
    """Variant dispatch from intermediate map to an un-normalized vector."""
    return _pool(params, inter, pooling)


def extract(params: dict[str, Tensor], fm: Tensor, pooling: str = "full",
            eps: float = 1e-12) -> Tensor:
    """Feature map -> unit-norm instance representation (single or batch)."""
    inter = bilinear_intermediate(params, fm, pooling)
    pooled = pool_features(params, inter, pooling)
    return T.l2_normalize(pooled, eps)


def embed_instance(params: dict[str, Tensor], image: Tensor, cfg: BackboneConfig,
                   pooling: str = "full", eps: float = 1e-12) -> Tensor:
    """Full path image -> unit-norm representation.

    Support and query instances go through this exact same path.
    """
    fm = backbone_forward(params, image, cfg)
    return extract(params, fm, pooling, eps)
