"""Episodic protocol: task sampling, pre-training, meta-training, inference,
and evaluation with 95% confidence intervals.

Meta-training follows the standard loop: sample an N-way K-shot task, embed
the support set, build one class representation per class (revalued weights
or plain averaging), classify the queries with the cosine head, combine the
loss terms, and take one SGD step.  All randomness flows from one seed;
per-purpose streams are derived with fixed labels so components cannot
perturb each other's draws.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import airn, head
from . import tensor as T
from .backbone import (BackboneConfig, backbone_forward, global_average_pool,
                       init_backbone, init_pretrain_head, pretrain_head_forward)
from .data import DatasetContainer, SplitSpec, random_flip_crop
from .model import Model
from .optim import SGD
from .tensor import ContractViolation, Tensor

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch,episode,l_cls,l_intra,l_inter,l_joint,query_acc"


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent stream for one purpose, reproducible from (seed, label)."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    n: int = 5
    k: int = 5
    m: int = 15
    epochs: int = 200
    episodes_per_epoch: int = 100
    lr_backbone: float = 0.001
    lr_new: float = 0.01
    lr_airn: float = 0.0        # 0 -> revaluing MLP trains in the lr_new group
    lr_pretrain: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay: float = 0.1
    decay_milestones: tuple[int, ...] = ()   # empty -> 50% and 75% of epochs
    lambda1: float = 0.1
    lambda2: float = 0.1
    tau: float = 10.0
    seed: int = 0
    augment: bool = True
    crop_pad: int = 4
    losses: tuple[str, ...] = ("cls", "intra", "inter")
    val_fraction: float = 0.1
    val_episodes: int = 40
    pretrain_batch: int = 64

    def __post_init__(self):
        for name in ("lr_backbone", "lr_new", "lr_pretrain"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be > 0")
        if "cls" not in self.losses:
            raise ContractViolation("the classification loss cannot be ablated away")
        for term in self.losses:
            if term not in ("cls", "intra", "inter"):
                raise ContractViolation(f"unknown loss term {term!r}")

    def milestones(self) -> tuple[int, ...]:
        if self.decay_milestones:
            return self.decay_milestones
        return (max(1, round(self.epochs * 0.5)), max(1, round(self.epochs * 0.75)))


# -- episodes ---------------------------------------------------------------------


@dataclass
class Episode:
    """One N-way K-shot task plus provenance back into the source container."""
    support: np.ndarray          # (N, K, c, h, w)
    query: np.ndarray            # (N, M, c, h, w)
    class_map: tuple[int, ...]   # class slot -> global class id
    support_index: np.ndarray    # (N, K) instance index within the class
    query_index: np.ndarray      # (N, M)

    @property
    def n(self) -> int:
        return self.support.shape[0]

    @property
    def k(self) -> int:
        return self.support.shape[1]

    @property
    def m(self) -> int:
        return self.query.shape[1]

    @property
    def support_flat(self) -> np.ndarray:
        return self.support.reshape((-1,) + self.support.shape[2:])

    @property
    def query_flat(self) -> np.ndarray:
        return self.query.reshape((-1,) + self.query.shape[2:])

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.k)

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.m)


def sample_episode(container: DatasetContainer, class_ids, rng: np.random.Generator,
                   n: int, k: int, m: int) -> Episode:
    """Sample classes without replacement, then K+M distinct instances per
    class (first K as support), so support and query never share an instance.
    """
    class_ids = np.asarray(list(class_ids), dtype=int)
    if len(class_ids) < n:
        raise ContractViolation(f"split has {len(class_ids)} classes, need {n}")
    chosen = rng.choice(class_ids, size=n, replace=False)
    support = np.empty((n, k) + container.instance_shape, dtype=np.float32)
    query = np.empty((n, m) + container.instance_shape, dtype=np.float32)
    support_index = np.empty((n, k), dtype=int)
    query_index = np.empty((n, m), dtype=int)
    for slot, gid in enumerate(chosen):
        block = container.instances[gid]
        if block.shape[0] < k + m:
            raise ContractViolation(
                f"class {gid} has {block.shape[0]} instances, need {k + m}")
        picked = rng.choice(block.shape[0], size=k + m, replace=False)
        support_index[slot] = picked[:k]
        query_index[slot] = picked[k:]
        support[slot] = block[picked[:k]]
        query[slot] = block[picked[k:]]
    return Episode(support, query, tuple(int(g) for g in chosen),
                   support_index, query_index)


# -- episode forward ---------------------------------------------------------------


def class_representations(model: Model, support_reps: Tensor,
                          n: int, k: int) -> tuple[Tensor, Tensor | None]:
    """(N*K, dF) support stack -> ((N, dF) class vectors, (N, K) weights or None)."""
    if model.cfg.use_airn and k != model.cfg.k_shot:
        raise ContractViolation(
            f"model revalues K={model.cfg.k_shot} support instances, episode has K={k}")
    reps, sigs = [], []
    for slot in range(n):
        u = T.slice_rows(support_reps, slot * k, (slot + 1) * k)
        if model.cfg.use_airn:
            c, a = airn.class_representation(model.params, u)
            sigs.append(a)
        else:
            c = airn.mean_class_representation(u)
        reps.append(c)
    stacked = T.stack(reps)
    return stacked, (T.stack(sigs) if sigs else None)


@dataclass
class EpisodeResult:
    predictions: np.ndarray               # (N*M,) predicted class slots
    logits: np.ndarray                    # (N*M, N)
    significance: np.ndarray | None       # (N, K) weights, None without revaluing


def infer_episode(model: Model, episode: Episode) -> EpisodeResult:
    """Pure inference: predictions plus the per-class significance weights."""
    with T.no_grad():
        sup = model.embed(episode.support_flat)
        creps, sig = class_representations(model, sup, episode.n, episode.k)
        q = model.embed(episode.query_flat)
        logits = head.cosine_logits(q, creps, model.cfg.tau, model.cfg.eps)
    return EpisodeResult(head.predict(logits), logits.data.copy(),
                         None if sig is None else sig.data.copy())


def episode_objective(model: Model, episode: Episode, cfg: TrainConfig,
                      aug_rng: np.random.Generator | None = None):
    """Training forward pass: loss graph, its scalar breakdown, query accuracy."""
    sup_images = episode.support_flat
    q_images = episode.query_flat
    if aug_rng is not None and cfg.augment:
        sup_images = random_flip_crop(sup_images, aug_rng, cfg.crop_pad)
        q_images = random_flip_crop(q_images, aug_rng, cfg.crop_pad)
    sup = model.embed(sup_images)
    creps, _ = class_representations(model, sup, episode.n, episode.k)
    q = model.embed(q_images)
    logits = head.cosine_logits(q, creps, model.cfg.tau, model.cfg.eps)
    l_cls = head.loss_cls(logits, episode.query_labels)
    l_intra = (head.loss_intra(sup, creps, episode.support_labels,
                               model.cfg.tau, model.cfg.eps)
               if "intra" in cfg.losses else None)
    l_inter = head.loss_inter(creps, model.cfg.eps) if "inter" in cfg.losses else None
    total, breakdown = head.loss_joint(l_cls, l_intra, l_inter, cfg.lambda1, cfg.lambda2)
    acc = float((head.predict(logits) == episode.query_labels).mean())
    return total, breakdown, acc


# -- metrics logging ---------------------------------------------------------------


def format_metrics_row(epoch: int, episode: int, bd: head.LossBreakdown,
                       acc: float) -> str:
    return ",".join([str(epoch), str(episode), repr(bd.cls), repr(bd.intra),
                     repr(bd.inter), repr(bd.joint), repr(acc)])


def write_metrics(path, rows: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")


# -- meta-training -----------------------------------------------------------------


def meta_train(container: DatasetContainer, split: SplitSpec, cfg: TrainConfig,
               model: Model, metrics_path=None):
    """Episodic training of a prepared model over the train classes.

    Two optimizer groups run at distinct rates (backbone vs everything
    newly initialized).  Returns the trained model plus the per-episode
    metrics rows that were (optionally) written to ``metrics_path``.
    """
    if cfg.n < 2:
        raise ContractViolation("meta-training needs N >= 2 classes per episode")
    opt = SGD(model.param_groups(cfg.lr_backbone, cfg.lr_new, cfg.lr_airn),
              momentum=cfg.momentum, weight_decay=cfg.weight_decay, nesterov=True)
    sampler_rng = rng_for(cfg.seed, "meta.episodes")
    aug_rng = rng_for(cfg.seed, "meta.augment")
    milestones = set(cfg.milestones())
    rows: list[str] = []
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        if epoch in milestones:
            opt.scale_lr(cfg.lr_decay)
        for index in range(1, cfg.episodes_per_epoch + 1):
            episode = sample_episode(container, split.train, sampler_rng,
                                     cfg.n, cfg.k, cfg.m)
            total, bd, acc = episode_objective(model, episode, cfg, aug_rng)
            opt.zero_grad()
            total.backward()
            opt.step()
            rows.append(format_metrics_row(epoch, index, bd, acc))
            history.append({"epoch": epoch, "episode": index, "loss": bd, "acc": acc})
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return model, history, rows


# -- pre-training ------------------------------------------------------------------


def _holdout_counts(sizes: list[int], fraction: float) -> list[int]:
    """Per-class validation instance counts; 0 when a class is too small."""
    counts = []
    for n in sizes:
        if n < 3:
            counts.append(0)
            continue
        c = max(2, int(round(fraction * n)))
        counts.append(min(c, n - 1))
    return counts


def _nearest_prototype_accuracy(params, backbone_cfg, val_pool, rng,
                                episodes: int, n_way: int) -> float:
    """1-shot accuracy of cosine nearest-prototype over pooled features."""
    usable = [c for c in range(len(val_pool)) if val_pool[c].shape[0] >= 2]
    if len(usable) < n_way:
        return 0.0
    correct = 0
    total = 0
    for _ in range(episodes):
        classes = rng.choice(np.asarray(usable), size=n_way, replace=False)
        images, labels = [], []
        for slot, c in enumerate(classes):
            idx = rng.choice(val_pool[c].shape[0], size=2, replace=False)
            images.append(val_pool[c][idx])
            labels.append(slot)
        batch = np.concatenate(images, axis=0)   # pairs: [sup, qry] per class
        with T.no_grad():
            fm = backbone_forward(params, Tensor(batch), backbone_cfg)
            feats = global_average_pool(fm).data
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
        protos = feats[0::2]
        queries = feats[1::2]
        preds = (queries @ protos.T).argmax(axis=1)
        correct += int((preds == np.arange(n_way)).sum())
        total += n_way
    return correct / total if total else 0.0


def pretrain(container: DatasetContainer, split: SplitSpec, cfg: TrainConfig,
             backbone_cfg: BackboneConfig, epochs: int, metrics_path=None):
    """Whole-classifier training of the backbone over all train classes.

    Each train class's instances are divided into a model-training part and
    a held-out validation part; after every epoch, 1-shot episodes sampled
    from the held-out part (cosine nearest prototype over pooled features)
    score the checkpoint, and the best-scoring epoch's parameters win.
    With ``epochs`` = 0 the freshly initialized parameters come back as-is.
    """
    train_ids = list(split.train)
    if not train_ids:
        raise ContractViolation("empty train split")
    init_rng = rng_for(cfg.seed, "pretrain.init")
    params = init_backbone(backbone_cfg, init_rng)
    params.update(init_pretrain_head(backbone_cfg, len(train_ids), init_rng))

    sizes = [container.instances[g].shape[0] for g in train_ids]
    holdout = _holdout_counts(sizes, cfg.val_fraction)
    split_rng = rng_for(cfg.seed, "pretrain.holdout")
    train_pool, val_pool = [], []
    for gid, n_val in zip(train_ids, holdout):
        block = container.instances[gid]
        order = split_rng.permutation(block.shape[0])
        val_pool.append(block[order[:n_val]])
        train_pool.append(block[order[n_val:]])

    flat: list[tuple[int, int]] = [(ci, i) for ci, block in enumerate(train_pool)
                                   for i in range(block.shape[0])]
    opt = SGD([{"params": params, "lr": cfg.lr_pretrain}],
              momentum=cfg.momentum, weight_decay=cfg.weight_decay, nesterov=True)
    batch_rng = rng_for(cfg.seed, "pretrain.batches")
    aug_rng = rng_for(cfg.seed, "pretrain.augment")
    half, three_quarters = max(1, round(epochs * 0.5)), max(1, round(epochs * 0.75))

    best = {name: Tensor(p.data.copy(), requires_grad=True) for name, p in params.items()}
    best_acc = -1.0
    best_epoch = 0
    rows: list[str] = []
    for epoch in range(1, epochs + 1):
        if epoch in (half, three_quarters) and epochs > 1:
            opt.scale_lr(cfg.lr_decay)
        order = batch_rng.permutation(len(flat))
        losses = []
        for start in range(0, len(order), cfg.pretrain_batch):
            batch_idx = order[start:start + cfg.pretrain_batch]
            images = np.stack([train_pool[flat[i][0]][flat[i][1]] for i in batch_idx])
            labels = np.array([flat[i][0] for i in batch_idx])
            if cfg.augment:
                images = random_flip_crop(images, aug_rng, cfg.crop_pad)
            logits = pretrain_head_forward(params, backbone_forward(params, Tensor(images),
                                                                    backbone_cfg))
            loss = T.softmax_cross_entropy(logits, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_rng = rng_for(cfg.seed, f"pretrain.val.{epoch}")
        acc = _nearest_prototype_accuracy(params, backbone_cfg, val_pool, val_rng,
                                          cfg.val_episodes, min(cfg.n, len(train_ids)))
        rows.append(f"{epoch},{repr(float(np.mean(losses)))},{repr(acc)}")
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best = {name: Tensor(p.data.copy(), requires_grad=True)
                    for name, p in params.items()}
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8", newline="") as f:
            f.write("epoch,train_loss,val_1shot_acc\n")
            for row in rows:
                f.write(row + "\n")
    return best, best_epoch, rows


# -- evaluation --------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-episode accuracies with their mean and 95% half-width."""
    accuracies: list[float]
    n: int
    k: int
    m: int
    seed: int
    mean: float = field(init=False)
    ci95: float = field(init=False)

    def __post_init__(self):
        e = len(self.accuracies)
        if e < 1:
            raise ContractViolation("a report needs at least one episode")
        self.mean = float(np.mean(self.accuracies))
        if not 0.0 <= self.mean <= 1.0:
            raise ContractViolation("mean accuracy outside [0,1]")
        self.ci95 = (float(1.96 * np.std(self.accuracies, ddof=1) / np.sqrt(e))
                     if e > 1 else 0.0)

    @property
    def episodes(self) -> int:
        return len(self.accuracies)

    def to_json_dict(self) -> dict:
        return {"mean": self.mean, "ci95": self.ci95, "episodes": self.episodes,
                "n": self.n, "k": self.k, "m": self.m, "seed": self.seed}

    def format_text(self) -> str:
        return (f"{self.mean * 100:.2f} ± {self.ci95 * 100:.2f} "
                f"({self.n}-way {self.k}-shot, {self.episodes} episodes)")


def evaluate(model: Model, container: DatasetContainer, class_ids,
             episodes: int = 600, n: int = 5, k: int = 1, m: int = 15,
             seed: int = 0) -> EvalReport:
    """Mean accuracy over independently sampled episodes, with
    ci95 = 1.96 * sample-std / sqrt(episodes).  Bit-reproducible for a
    fixed (model, seed)."""
    if episodes < 1:
        raise ContractViolation("need at least one evaluation episode")
    rng = rng_for(seed, "eval")
    accs = []
    for _ in range(episodes):
        episode = sample_episode(container, class_ids, rng, n, k, m)
        result = infer_episode(model, episode)
        accs.append(float((result.predictions == episode.query_labels).mean()))
    return EvalReport(accs, n, k, m, seed)


def collect_significance(model: Model, container: DatasetContainer, class_ids,
                         flags: list[np.ndarray], episodes: int, n: int, k: int,
                         m: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Significance weights split by the outlier flag of their instance.

    Uses the same episode stream as ``evaluate`` for the same seed.  Returns
    (clean weights, flagged weights) pooled over all episodes and classes.
    """
    rng = rng_for(seed, "eval")
    clean: list[float] = []
    flagged: list[float] = []
    for _ in range(episodes):
        episode = sample_episode(container, class_ids, rng, n, k, m)
        result = infer_episode(model, episode)
        if result.significance is None:
            raise ContractViolation("model carries no instance revaluing network")
        for slot in range(n):
            gid = episode.class_map[slot]
            for shot in range(k):
                weight = float(result.significance[slot, shot])
                if flags[gid][episode.support_index[slot, shot]]:
                    flagged.append(weight)
                else:
                    clean.append(weight)
    return np.asarray(clean), np.asarray(flagged)
