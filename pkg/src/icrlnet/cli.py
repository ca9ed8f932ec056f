"""Command-line surface: synth, pretrain, meta-train, eval, inspect.

Every command is deterministic given the same config and seed.  Exit
codes: 0 success, 1 runtime contract violation, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, read_config_file
from .data import (SyntheticSpec, gen_blobs, gen_outlier_blobs, load_container,
                   load_split, save_container, save_flags, split_classes)
from .episodes import (TrainConfig, evaluate, infer_episode, meta_train,
                       pretrain, rng_for, sample_episode)
from .model import Model, ModelConfig, init_model
from .tensor import ContractViolation

_OVERRIDE_KEYS = (
    "seed", "n", "k", "m", "episodes", "epochs", "episodes_per_epoch",
    "tau", "lambda1", "lambda2", "airn", "pooling", "losses",
    "dataset", "checkpoint", "out", "split", "augment",
    "blocks", "channels", "crop_pad",
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags win over it")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--episodes", type=int, help="evaluation episode count")
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-epoch", dest="episodes_per_epoch", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--airn", choices=["on", "off"])
    p.add_argument("--pooling", choices=["full", "model-1", "model-2", "model-3",
                                         "model-4", "model-5"])
    p.add_argument("--losses", help="subset of cls,intra,inter (cls required)")
    p.add_argument("--augment", choices=["on", "off"])
    p.add_argument("--blocks", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--crop-pad", dest="crop_pad", type=int)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--split", help="split file (sections [train]/[val]/[test])")
    p.add_argument("--out")


def _config_from(args) -> tuple[RunConfig, set[str]]:
    overrides = {key: getattr(args, key) for key in _OVERRIDE_KEYS
                 if getattr(args, key, None) is not None}
    file_values = read_config_file(args.config) if args.config else {}
    cfg = load_config(None, {**file_values, **overrides})
    return cfg, set(file_values) | set(overrides)


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(f"missing required setting {name!r} "
                              f"(flag --{name} or config key)")


def _load_dataset(cfg: RunConfig):
    container = load_container(cfg.dataset)
    if cfg.split:
        split = load_split(cfg.split)
    else:
        split = split_classes(container, ratios=cfg.split_ratios, seed=cfg.seed)
    return container, split


def _backbone_cfg(cfg: RunConfig, container) -> BackboneConfig:
    c, h, w = container.instance_shape
    if h != w:
        raise ContractViolation(f"non-square instances {h}x{w} are unsupported")
    return BackboneConfig(in_channels=c, image_size=h, blocks=cfg.blocks,
                          channels=cfg.channels)


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        n=cfg.n, k=cfg.k, m=cfg.m, epochs=cfg.epochs,
        episodes_per_epoch=cfg.episodes_per_epoch,
        lr_backbone=cfg.lr_backbone, lr_new=cfg.lr_new, lr_pretrain=cfg.lr_pretrain,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        lr_decay=cfg.lr_decay, decay_milestones=tuple(cfg.decay_milestones),
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, tau=cfg.tau, seed=cfg.seed,
        augment=cfg.augment, crop_pad=cfg.crop_pad, losses=tuple(cfg.losses),
        val_fraction=cfg.val_fraction, val_episodes=cfg.val_episodes,
        pretrain_batch=cfg.pretrain_batch)


def _structure_config(cfg: RunConfig, bb: BackboneConfig) -> dict:
    return {
        "n": cfg.n, "k": cfg.k, "m": cfg.m, "tau": cfg.tau,
        "pooling": cfg.pooling, "airn": "on" if cfg.airn else "off",
        "airn_hidden": cfg.airn_hidden,
        "blocks": bb.blocks, "channels": bb.channels,
        "in_channels": bb.in_channels, "image_size": bb.image_size,
        "lambda1": cfg.lambda1, "lambda2": cfg.lambda2,
        "losses": ",".join(cfg.losses), "seed": cfg.seed,
    }


def _model_from_checkpoint(path) -> tuple[Model, dict[str, str]]:
    params, conf = load_checkpoint(path)
    bb = BackboneConfig(in_channels=int(conf["in_channels"]),
                        image_size=int(conf["image_size"]),
                        blocks=int(conf["blocks"]), channels=int(conf["channels"]))
    mc = ModelConfig(backbone=bb, k_shot=int(conf["k"]),
                     use_airn=conf.get("airn", "on") == "on",
                     airn_hidden=int(conf.get("airn_hidden", "0")),
                     pooling=conf.get("pooling", "full"),
                     tau=float(conf.get("tau", "10.0")))
    return Model(mc, params), conf


def _split_ids(split, which: str):
    ids = {"train": split.train, "val": split.val, "test": split.test}[which]
    if not ids:
        raise ContractViolation(f"{which} split is empty")
    return ids


# -- commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSpec(classes=args.classes, per_class=args.per_class,
                         channels=args.synth_channels, size=args.size,
                         separation=args.separation, noise=args.noise,
                         outlier_fraction=args.outlier_fraction,
                         outlier_rule=args.outlier_rule, seed=args.seed)
    if spec.outlier_fraction > 0:
        container, flags = gen_outlier_blobs(spec)
        save_flags(flags, spec.outlier_rule, args.out + ".flags.json")
    else:
        container = gen_blobs(spec)
    save_container(container, args.out)
    print(f"wrote {container.n_classes} classes x {spec.per_class} instances "
          f"({spec.channels}x{spec.size}x{spec.size}) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg, _ = _config_from(args)
    _require(cfg, "dataset", "out")
    container, split = _load_dataset(cfg)
    bb = _backbone_cfg(cfg, container)
    params, best_epoch, _ = pretrain(container, split, _train_cfg(cfg), bb,
                                     epochs=cfg.epochs,
                                     metrics_path=cfg.out + ".metrics.csv")
    conf = _structure_config(cfg, bb)
    conf.update({"phase": "pretrain", "n_classes": len(split.train),
                 "best_epoch": best_epoch})
    save_checkpoint(cfg.out, params, conf)
    print(f"pretrained {cfg.epochs} epochs, best epoch {best_epoch}; "
          f"checkpoint at {cfg.out}")
    return 0


def cmd_meta_train(args) -> int:
    cfg, _ = _config_from(args)
    _require(cfg, "dataset", "out")
    container, split = _load_dataset(cfg)
    bb = _backbone_cfg(cfg, container)
    mc = ModelConfig(backbone=bb, k_shot=cfg.k, use_airn=cfg.airn,
                     airn_hidden=cfg.airn_hidden, pooling=cfg.pooling, tau=cfg.tau)
    model = init_model(mc, rng_for(cfg.seed, "init"))
    if not args.from_scratch:
        if not cfg.checkpoint:
            raise ConfigError("meta-train needs --checkpoint or --from-scratch")
        pre_params, pre_conf = load_checkpoint(cfg.checkpoint)
        for key in ("blocks", "channels", "in_channels", "image_size"):
            if int(pre_conf[key]) != getattr(bb, key):
                raise ContractViolation(
                    f"checkpoint {key}={pre_conf[key]} does not match run "
                    f"configuration {key}={getattr(bb, key)}")
        for name in list(model.params):
            if name.startswith("backbone."):
                model.params[name] = pre_params[name]
                model.params[name].requires_grad = True
    model, history, _ = meta_train(container, split, _train_cfg(cfg), model,
                                   metrics_path=cfg.out + ".metrics.csv")
    conf = _structure_config(cfg, bb)
    conf["phase"] = "meta"
    save_checkpoint(cfg.out, model.params, conf)
    window = history[-50:]
    acc = float(np.mean([h["acc"] for h in window])) if window else 0.0
    print(f"meta-trained {len(history)} episodes; last-{len(window)} mean "
          f"query accuracy {acc:.4f}; checkpoint at {cfg.out}")
    return 0


def cmd_eval(args) -> int:
    cfg, explicit = _config_from(args)
    _require(cfg, "dataset", "checkpoint")
    model, conf = _model_from_checkpoint(cfg.checkpoint)
    container, split = _load_dataset(cfg)
    ids = _split_ids(split, cfg.eval_split)
    if model.cfg.use_airn:
        if "k" in explicit and cfg.k != model.cfg.k_shot:
            raise ContractViolation(
                f"checkpoint revalues K={model.cfg.k_shot} support instances; "
                f"cannot evaluate at K={cfg.k}")
        k = model.cfg.k_shot
    else:
        k = cfg.k
    report = evaluate(model, container, ids, episodes=cfg.episodes,
                      n=cfg.n, k=k, m=cfg.m, seed=cfg.seed)
    print(report.format_text())
    payload = json.dumps(report.to_json_dict(), sort_keys=True) + "\n"
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8", newline="") as f:
            f.write(payload)
    else:
        sys.stdout.write(payload)
    return 0


def cmd_inspect(args) -> int:
    cfg, _ = _config_from(args)
    _require(cfg, "dataset", "checkpoint")
    model, _ = _model_from_checkpoint(cfg.checkpoint)
    if not model.cfg.use_airn:
        raise ContractViolation("checkpoint carries no instance revaluing network")
    container, split = _load_dataset(cfg)
    ids = _split_ids(split, cfg.eval_split)
    k = model.cfg.k_shot
    episode = sample_episode(container, ids, rng_for(cfg.seed, "inspect"),
                             n=cfg.n, k=k, m=cfg.m)
    result = infer_episode(model, episode)
    if k == 1:
        print("note: 1-shot episode, a single weight per class", file=sys.stderr)
    lines = ["episode,class,instance,weight"]
    for slot in range(episode.n):
        order = np.argsort(-result.significance[slot], kind="stable")
        for shot in order:
            lines.append(f"{cfg.seed},{episode.class_map[slot]},"
                         f"{episode.support_index[slot, shot]},"
                         f"{repr(float(result.significance[slot, shot]))}")
    text = "\n".join(lines) + "\n"
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icrlnet",
        description="Few-shot classification with instance-adaptive class "
                    "representations: train, evaluate, and inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cluster dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", dest="per_class", type=int, default=30)
    p.add_argument("--channels", dest="synth_channels", type=int, default=3)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--outlier-fraction", dest="outlier_fraction", type=float, default=0.0)
    p.add_argument("--outlier-rule", dest="outlier_rule",
                   choices=["other-class", "uniform"], default="other-class")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="whole-classifier backbone pre-training")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("meta-train", help="episodic training")
    _add_common(p)
    p.add_argument("--from-scratch", action="store_true",
                   help="skip loading a pre-trained backbone")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("eval", help="episode evaluation with a 95% interval")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="export per-instance significance weights")
    _add_common(p)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
