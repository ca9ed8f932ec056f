"""Few-shot classification with instance-adaptive class representations.

A desk-scale, numpy-only engine: a reverse-mode autodiff tensor core, a
small convolutional backbone, an attentional bilinear instance extractor,
a support-instance revaluing network, a cosine classifier with a
three-term objective, and the episodic N-way K-shot protocol around them.
"""

from .airn import class_representation, combine, mean_class_representation, summarize, weigh
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_config, load_config
from .data import (DatasetContainer, FormatError, SplitSpec, SyntheticSpec,
                   gen_blobs, gen_outlier_blobs, load_container, save_container,
                   split_classes)
from .episodes import (Episode, EvalReport, TrainConfig, evaluate, infer_episode,
                       meta_train, pretrain, rng_for, sample_episode)
from .extractor import attention_pool, bilinear_intermediate, embed_instance
from .gradcheck import GradCheckReport, grad_check, shadow_params
from .head import (LossBreakdown, cosine_logits, loss_cls, loss_inter, loss_intra,
                   loss_joint, predict)
from .model import Model, ModelConfig, init_model
from .optim import SGD
from .tensor import ContractViolation, Tensor, no_grad, set_debug

__version__ = "0.1.0"
