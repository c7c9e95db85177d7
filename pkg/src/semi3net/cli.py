"""Command-line entry points: data generation, training, evaluation, retrieval, gradient checks."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigFileError, RunConfig, load_config
from .data import generate_dataset, load_dataset
from .gradcheck import run_suite
from .losses import LossLog
from .model import build_model, load_checkpoint, save_checkpoint
from .params import CheckpointFormatError
from .retrieval import SOURCES, build_index, embed_sketches, evaluate, rank
from .trainer import TrainingDiverged, TyingViolation, pretrain, train_joint

log = logging.getLogger("semi3net")


class CommandError(RuntimeError):
    """Numeric or data failure; reported with exit status 1."""


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _check_dataset(cfg: RunConfig, dataset) -> None:
    if dataset.num_categories > cfg.backbone.num_classes:
        raise CommandError(f"dataset has {dataset.num_categories} categories, "
                           f"model has {cfg.backbone.num_classes} classes")
    if dataset.image_size != cfg.backbone.input_size:
        raise CommandError(f"dataset images are {dataset.image_size}px, model expects "
                           f"{cfg.backbone.input_size}px")


def _model_from_ckpt(path, cfg: RunConfig):
    return load_checkpoint(path, use_co_attention=cfg.use_co_attention, weights=cfg.weights)


def cmd_gen_data(args) -> int:
    cfg = _config(args.spec)
    out = generate_dataset(cfg.data, args.out)
    print(f"wrote {cfg.data.num_categories * cfg.data.per_category} samples to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    dataset = load_dataset(args.data)
    _check_dataset(cfg, dataset)
    model = build_model(cfg.backbone, cfg.share_plan, seed=cfg.train.seed, reduction=cfg.reduction,
                        use_co_attention=cfg.use_co_attention, weights=cfg.weights)
    history = pretrain(model, dataset, cfg.train)
    save_checkpoint(model, args.out)
    if args.log:
        history.write_csv(args.log)
    print(f"pretrained {len(history)} steps; final loss {history.rows[-1][-1]:.6f}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    dataset = load_dataset(args.data)
    _check_dataset(cfg, dataset)
    model = _model_from_ckpt(args.init, cfg)
    if model.plan.strategy != cfg.share_plan:
        raise CommandError(f"checkpoint is tied as {model.plan.strategy!r}, config asks for {cfg.share_plan!r}")
    if not model.tied:
        model.tie()
    every = cfg.train.checkpoint_every
    out = Path(args.out)

    def on_epoch(epoch: int, m) -> None:
        if every and (epoch + 1) % every == 0:
            save_checkpoint(m, out.with_name(f"{out.name}.epoch{epoch + 1}"))

    history: LossLog = train_joint(model, dataset, cfg.train, on_epoch=on_epoch)
    save_checkpoint(model, out)
    log_path = args.log or cfg.log_path
    if log_path:
        history.write_csv(log_path)
    print(f"trained {len(history)} steps; final loss {history.rows[-1][-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    dataset = load_dataset(args.data)
    model = _model_from_ckpt(args.ckpt, cfg)
    print(f"MAP={evaluate(model, dataset, args.source):.6f}")
    return 0


def cmd_retrieve(args) -> int:
    if args.top < 1:
        raise CommandError("--top must be at least 1")
    cfg = _config(args.config)
    dataset = load_dataset(args.data)
    model = _model_from_ckpt(args.ckpt, cfg)
    try:
        qi = dataset.index_of(args.query)
    except KeyError:
        raise CommandError(f"no sample with id {args.query}") from None
    index = build_index(model, dataset, args.source)
    query = embed_sketches(model, dataset.sketches[qi:qi + 1])[0]
    r = rank(index, query, args.query)
    for pos in range(min(args.top, len(r.ids))):
        print(f"{pos + 1},{r.ids[pos]},{r.distances[pos]:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    results, elapsed = run_suite(seed=args.seed, per_tensor=None if args.full else args.per_tensor)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semi3net", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    s.add_argument("--spec", required=True, help="configuration file with data keys")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="per-branch cross-entropy pretraining, then tie")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="optional CSV of pretraining losses")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="joint training with the hybrid loss")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MAP of test sketches against all images")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--source", choices=SOURCES, default="image")
    s.add_argument("--config", help="toggles such as use_co_attention")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("retrieve", help="rank the gallery for one sketch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--query", required=True, type=int)
    s.add_argument("--top", required=True, type=int)
    s.add_argument("--data", required=True)
    s.add_argument("--source", choices=SOURCES, default="image")
    s.add_argument("--config")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("grad-check", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-tensor", type=int, default=24,
                   help="coordinates sampled per parameter tensor in the end-to-end check")
    s.add_argument("--full", action="store_true", help="check every coordinate end to end")
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigFileError, CheckpointFormatError, TrainingDiverged,
            TyingViolation, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
