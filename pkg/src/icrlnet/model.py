"""Model bundle: structural configuration plus the flat named-parameter dict.

Parameter names are prefixed by subsystem ("backbone.", "abfe.", "airn.",
"pretrain.") which is what the optimizer grouping, checkpoints, and the
shadow-mode copies key on.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import airn, extractor
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .extractor import POOLING_VARIANTS
from .tensor import ContractViolation, Tensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    k_shot: int = 5
    use_airn: bool = True
    airn_hidden: int = 0        # 0 -> max(4, 4*K)
    pooling: str = "full"
    tau: float = 10.0
    eps: float = 1e-12

    def __post_init__(self):
        if self.pooling not in POOLING_VARIANTS:
            raise ContractViolation(f"unknown pooling variant {self.pooling!r}")
        if self.k_shot < 1:
            raise ContractViolation("k_shot must be >= 1")

    @property
    def hidden(self) -> int:
        return airn.hidden_width(self.k_shot, self.airn_hidden)

    @property
    def feature_dim(self) -> int:
        return extractor.feature_dim(self.backbone, self.pooling)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor]

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter cast to ``dtype`` (shadow mode)."""
        params = {name: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
                  for name, p in self.params.items()}
        return Model(self.cfg, params)

    def param_groups(self, lr_backbone: float, lr_new: float, lr_airn: float = 0.0):
        """Optimizer groups: backbone at one rate, everything new at another.

        With ``lr_airn`` > 0 the revaluing MLP is split into a third group at
        its own rate; its sigmoid-bounded output keeps that safe.  The
        default (0) keeps the two-group recipe.
        """
        backbone = {n: p for n, p in self.params.items() if n.startswith("backbone.")}
        fresh = {n: p for n, p in self.params.items() if not n.startswith("backbone.")}
        groups = [{"params": backbone, "lr": lr_backbone}]
        if lr_airn > 0:
            revaluer = {n: p for n, p in fresh.items() if n.startswith("airn.")}
            fresh = {n: p for n, p in fresh.items() if not n.startswith("airn.")}
            if revaluer:
                groups.append({"params": revaluer, "lr": lr_airn})
        if fresh:
            groups.append({"params": fresh, "lr": lr_new})
        return groups

    def embed(self, images: np.ndarray | Tensor) -> Tensor:
        """Batch of images (B,c,s,s) -> unit-norm representations (B,dF)."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        fm = backbone_forward(self.params, x, self.cfg.backbone)
        return extractor.extract(self.params, fm, self.cfg.pooling, self.cfg.eps)


def init_model(cfg: ModelConfig, rng: np.random.Generator,
               zero_airn: bool = False) -> Model:
    params = init_backbone(cfg.backbone, rng)
    params.update(extractor.init_extractor(cfg.backbone, cfg.pooling, rng))
    if cfg.use_airn:
        if zero_airn:
            params.update(airn.zero_init_airn(cfg.k_shot, cfg.hidden))
        else:
            params.update(airn.init_airn(cfg.k_shot, cfg.hidden, rng))
    return Model(cfg, params)


def with_k(cfg: ModelConfig, k: int) -> ModelConfig:
    return replace(cfg, k_shot=k)
