"""Command line entry point: generate, train, eval, ablate, diagnose."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import ablation
from .config import ALL_LOSSES, LOSS_GROUPS, ConfigError, RunConfig, expand_losses, load_config
from .dataset import Dataset, build_dataset, load_dataset, write_dataset
from .evaluator import TIMING_KEYS, evaluate_model
from .model import Student
from .trainer import Batcher, load_checkpoint, train

log = logging.getLogger("spatial_distill")


class IncompatibleCheckpointError(ValueError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "k", None) is not None and not isinstance(args.k, list):
        cfg.model.K = args.k
    if getattr(args, "loss_mode", None):
        cfg.train.loss_mode = args.loss_mode
    if getattr(args, "disable_loss", None):
        off = expand_losses(args.disable_loss)
        cfg.train.enabled_losses = tuple(k for k in cfg.train.enabled_losses if k not in off)
    cfg.validate()
    return cfg


def _echo_config(args, out: Path) -> None:
    if args.config is not None:
        out.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(args.config, out / "config.input.yaml")


def check_compatible(model: Student, ds: Dataset) -> None:
    """Raise with both shapes when a checkpoint cannot read a dataset."""
    mc = model.cfg
    rec = ds.scenes[0] if ds.scenes else None
    expected = (mc.n_views, mc.grid, mc.grid, mc.feature_channels)
    if rec is not None and tuple(rec.features.shape) != expected:
        raise IncompatibleCheckpointError(
            f"checkpoint expects view features of shape {expected}, data has {tuple(rec.features.shape)}"
        )
    if mc.vocab_size != len(ds.vocab):
        raise IncompatibleCheckpointError(
            f"checkpoint vocabulary has {mc.vocab_size} tokens, data vocabulary has {len(ds.vocab)}"
        )
    if mc.max_objects < ds.config.max_objects or mc.n_categories != ds.config.n_categories:
        raise IncompatibleCheckpointError(
            f"checkpoint detection head is ({mc.max_objects} objects, {mc.n_categories} categories), "
            f"data has ({ds.config.max_objects} objects, {ds.config.n_categories} categories)"
        )


def _dataset(args, cfg: RunConfig) -> Dataset:
    if args.data is not None:
        return load_dataset(args.data)
    seed = args.seed if args.seed is not None else 0
    log.info("no --data given; generating %d scenes with seed %d", cfg.dataset.n_scenes, seed)
    return build_dataset(cfg.dataset, seed)


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else 0
    ds = build_dataset(cfg.dataset, seed)
    out = Path(args.out)
    write_dataset(ds, out)
    _echo_config(args, out)
    (out / "generate.json").write_text(json.dumps({"seed": seed, "n_scenes": len(ds.scenes), "n_samples": len(ds)}))
    print(f"wrote {len(ds)} samples from {len(ds.scenes)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    cfg.dataset = ds.config
    out = Path(args.out)
    _echo_config(args, out)
    _, _, record = train(ds, cfg, out)
    print(
        f"best val loss {record.best_val_loss:.4f} at epoch {record.best_epoch}; "
        f"train loss {record.train_loss[0]:.4f} -> {record.train_loss[-1]:.4f}"
    )
    return 0


def _eval_indices(ds: Dataset, cfg: RunConfig, split: str) -> list[int]:
    if split == "all":
        return list(range(len(ds)))
    train_idx, val_idx = ds.split(cfg.train.val_frac, cfg.train.seed)
    return val_idx if split == "val" else train_idx


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    model, objective, _ = load_checkpoint(args.checkpoint)
    check_compatible(model, ds)
    cfg = objective.cfg
    indices = _eval_indices(ds, cfg, args.split)
    # with --oracle the teacher's own answers are scored; the checkpoint still supplies depth and timing
    answers = [ds.samples[i].qa.answer_text for i in indices] if args.oracle else None
    report, rows = evaluate_model(
        model,
        ds,
        indices,
        cfg.eval.max_new_tokens,
        cfg.eval.latency_runs,
        cfg.eval.reference_params,
        answers=answers,
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    # wall-clock fields go to their own file so metrics.json is reproducible
    metrics = report.to_dict()
    timing = {k: metrics["efficiency"].pop(k) for k in TIMING_KEYS if k in metrics["efficiency"]}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    with open(out / "qualitative.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    cfg.dataset = ds.config
    tables = {"loss": ("loss",), "k": ("k",), "all": ("loss", "k")}[args.sweep]
    ks = tuple(args.k) if args.k else ablation.K_SWEEP
    out = Path(args.out)
    _echo_config(args, out)
    result = ablation.ablate(ds, cfg, out, tables, ks)
    print(ablation.markdown(result))
    return 0


def cmd_diagnose(args) -> int:
    ds = load_dataset(args.data)
    model, _, _ = load_checkpoint(args.checkpoint)
    check_compatible(model, ds)
    if not 0 <= args.sample < len(ds):
        raise IndexError(f"sample {args.sample} out of range [0, {len(ds)})")
    sample = ds.samples[args.sample]
    rec = ds.scenes[sample.scene_index]
    features = torch.as_tensor(rec.features, dtype=torch.float32)
    depth = torch.as_tensor(rec.depth, dtype=torch.float32)
    q_ids = Batcher(ds, model.cfg).question_ids(args.sample)
    with torch.no_grad():
        answer = ds.vocab.decode(model.generate(features, depth, q_ids))
    print(f"answer: {answer}")
    if args.diagnostic:
        tokens = [ds.vocab.id_to_token[i] for i in model.decode_thinking(features, depth, q_ids)]
        print(f"thinking: {' '.join(tokens) if tokens else '(none)'}")
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-distill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True):
        if config:
            p.add_argument("--config", type=Path, help="run configuration YAML")
        p.add_argument("--seed", type=int, help="seed for data generation and training")
        if data:
            p.add_argument("--data", type=Path, help="dataset directory written by 'generate'")

    def training(p):
        p.add_argument("--k", type=int, help="number of thinking tokens")
        p.add_argument("--loss-mode", choices=("uncertainty", "static"))
        p.add_argument(
            "--disable-loss",
            action="append",
            choices=sorted((*ALL_LOSSES, *LOSS_GROUPS)),
            help="drop a loss term (repeatable)",
        )

    p = sub.add_parser("generate", help="build a synthetic dataset with teacher signals")
    common(p, data=False)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a student")
    common(p)
    training(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="report directory (default: next to the checkpoint)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--oracle", action="store_true", help="score the teacher's answers instead of generating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-component and thinking-token sweeps")
    common(p)
    p.add_argument("--k", type=int, action="append", help="K values for the thinking-token sweep (repeatable)")
    p.add_argument("--loss-mode", choices=("uncertainty", "static"))
    p.add_argument("--disable-loss", action="append", choices=sorted((*ALL_LOSSES, *LOSS_GROUPS)))
    p.add_argument("--sweep", choices=("all", "loss", "k"), default="all")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="print the answer for one sample")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sample", type=int, default=0, help="sample id")
    p.add_argument("--diagnostic", action="store_true", help="also decode the thinking tokens")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IncompatibleCheckpointError, FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
