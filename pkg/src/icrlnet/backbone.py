"""Convolutional feature extractor and the linear head used for pre-training.

The default stack is four blocks of conv3x3(pad 1) -> ReLU -> maxpool2,
32 channels per block, on 32x32 inputs, so the feature map comes out as
(channels, size/2^blocks, size/2^blocks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    image_size: int = 32
    blocks: int = 4
    channels: int = 32
    pool_window: int = 2

    def __post_init__(self):
        if self.channels <= 0 or self.blocks <= 0:
            raise ContractViolation("channels and blocks must be positive")
        if self.image_size % (self.pool_window ** self.blocks):
            raise ContractViolation(
                f"image size {self.image_size} not divisible by "
                f"{self.pool_window}^{self.blocks}")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        s = self.image_size // (self.pool_window ** self.blocks)
        return (self.channels, s, s)


def he_conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    """Fan-in scaled normal init for conv kernels feeding ReLU."""
    std = np.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c_in = cfg.in_channels
    for b in range(cfg.blocks):
        params[f"backbone.block{b}.w"] = Tensor(he_conv_init(rng, cfg.channels, c_in, 3),
                                                requires_grad=True)
        params[f"backbone.block{b}.b"] = Tensor(np.zeros(cfg.channels, dtype=np.float32),
                                                requires_grad=True)
        c_in = cfg.channels
    return params


def backbone_forward(params: dict[str, Tensor], x: Tensor, cfg: BackboneConfig) -> Tensor:
    """Feature map for one image (c,s,s) or a batch (B,c,s,s)."""
    spatial = x.shape[-1]
    if x.shape[-3] != cfg.in_channels or x.shape[-2] != spatial or spatial != cfg.image_size:
        raise ContractViolation(f"input shape {x.shape} does not match config {cfg}")
    out = x
    for b in range(cfg.blocks):
        out = T.conv2d(out, params[f"backbone.block{b}.w"],
                       params[f"backbone.block{b}.b"], stride=1, pad=1)
        out = T.relu(out)
        out = T.maxpool2d(out, cfg.pool_window)
    return out


def global_average_pool(fm: Tensor) -> Tensor:
    """(B,d,h,w) or (d,h,w) -> (B,d) or (d,): mean over the spatial extent."""
    if fm.ndim == 3:
        d, h, w = fm.shape
        return T.reduce_mean(T.reshape(fm, (d, h * w)), axis=1)
    b, d, h, w = fm.shape
    return T.reduce_mean(T.reshape(fm, (b, d, h * w)), axis=2)


def init_pretrain_head(cfg: BackboneConfig, n_classes: int,
                       rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.channels
    limit = 1.0 / np.sqrt(d)
    w = rng.uniform(-limit, limit, size=(d, n_classes)).astype(np.float32)
    return {
        "pretrain.head.w": Tensor(w, requires_grad=True),
        "pretrain.head.b": Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True),
    }


def pretrain_head_forward(params: dict[str, Tensor], fm: Tensor) -> Tensor:
    """Class logits over all base classes: global average pool, then affine."""
    pooled = global_average_pool(fm)
    if pooled.ndim == 1:
        pooled = T.reshape(pooled, (1, pooled.shape[0]))
    return T.affine(pooled, params["pretrain.head.w"], params["pretrain.head.b"])
