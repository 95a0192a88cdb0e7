"""Training loop: AdamW, warmup + cosine schedule, uncertainty-weighted
multi-task objective, best/last checkpoints and per-step loss logs."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import losses as L
from .config import ALL_LOSSES, ModelConfig, RunConfig, model_config_for
from .dataset import Dataset
from .model import Student, StudentOutputs, init_params
from .sequence import MASK, build_sequence
from .tokenizer import PAD

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# batching


class Batcher:
    """Pre-tensorised view of a dataset for one model configuration."""

    def __init__(self, ds: Dataset, model_cfg: ModelConfig, dtype: torch.dtype = torch.float32):
        self.ds = ds
        self.cfg = model_cfg
        self.dtype = dtype
        o, p = model_cfg.max_objects, max(model_cfg.max_pairs, 1)
        n_cat = model_cfg.n_categories
        scenes = ds.scenes
        self.features = torch.tensor(np.stack([s.features for s in scenes]), dtype=dtype)
        self.depth = torch.tensor(np.stack([s.depth for s in scenes]), dtype=dtype)
        self.t_spatial = torch.tensor(np.stack([s.teacher["spatial_features"] for s in scenes]), dtype=dtype)
        self.t_depth_bins = torch.tensor(np.stack([s.teacher["depth_bin_dist"] for s in scenes]), dtype=dtype)
        self.d_max = torch.tensor([s.graph.diagonal for s in scenes], dtype=dtype)
        det = np.full((len(scenes), o, n_cat), 1.0 / n_cat)
        boxes = np.zeros((len(scenes), o, 6))
        obj_mask = np.zeros((len(scenes), o), dtype=bool)
        lr = np.full((len(scenes), p, 2), 0.5)
        ab = np.full((len(scenes), p, 2), 0.5)
        pair_mask = np.zeros((len(scenes), p), dtype=bool)
        for i, s in enumerate(scenes):
            n = len(s.teacher["det_class_probs"])
            det[i, :n] = s.teacher["det_class_probs"]
            boxes[i, :n] = s.teacher["det_boxes"]
            obj_mask[i, :n] = True
            m = len(s.teacher["rel_lr"])
            lr[i, :m] = s.teacher["rel_lr"]
            ab[i, :m] = s.teacher["rel_ab"]
            pair_mask[i, :m] = True
        self.t_det = torch.tensor(det, dtype=dtype)
        self.t_boxes = torch.tensor(boxes, dtype=dtype)
        self.obj_mask = torch.tensor(obj_mask)
        self.t_lr = torch.tensor(lr, dtype=dtype)
        self.t_ab = torch.tensor(ab, dtype=dtype)
        self.pair_mask = torch.tensor(pair_mask)
        self.seqs = []
        for s in ds.samples:
            q = ds.vocab.words(s.qa.question_text)
            self.seqs.append(
                build_sequence(model_cfg.K, q, s.answer_ids.tolist(), model_cfg.max_seq_len, model_cfg.question_before_thinking)
            )

    def question_ids(self, i: int) -> list[int]:
        return self.ds.vocab.words(self.ds.samples[i].qa.question_text)

    def batch(self, indices: Sequence[int]) -> dict[str, torch.Tensor]:
        seqs = [self.seqs[i] for i in indices]
        n = max(s.total_len for s in seqs)
        vocab = self.cfg.vocab_size
        ids = torch.full((len(seqs), n), PAD, dtype=torch.long)
        labels = torch.full((len(seqs), n), MASK, dtype=torch.long)
        teacher = torch.zeros((len(seqs), n, vocab), dtype=self.dtype)
        t_start = torch.zeros(len(seqs), dtype=torch.long)
        for b, (i, s) in enumerate(zip(indices, seqs)):
            ids[b, : s.total_len] = torch.as_tensor(s.input_ids)
            labels[b, : s.total_len] = torch.as_tensor(s.label_ids)
            a = s.span("A")
            teacher[b, a] = torch.as_tensor(self.ds.samples[i].soft_targets, dtype=self.dtype)
            t_start[b] = s.span("T").start
        sc = torch.tensor([self.ds.samples[i].scene_index for i in indices])
        return {
            "input_ids": ids,
            "labels": labels,
            "teacher_probs": teacher,
            "t_start": t_start,
            "features": self.features[sc],
            "depth": self.depth[sc],
            "t_spatial": self.t_spatial[sc],
            "t_depth_bins": self.t_depth_bins[sc],
            "d_max": self.d_max[sc],
            "t_det": self.t_det[sc],
            "t_boxes": self.t_boxes[sc],
            "obj_mask": self.obj_mask[sc],
            "t_lr": self.t_lr[sc],
            "t_ab": self.t_ab[sc],
            "pair_mask": self.pair_mask[sc],
        }


def run_model(model: Student, batch: dict[str, torch.Tensor]) -> StudentOutputs:
    t_start = batch["t_start"] if model.cfg.question_before_thinking else None
    return model(batch["input_ids"], batch["features"], batch["depth"], t_start)


def compute_bundle(
    out: StudentOutputs,
    batch: dict[str, torch.Tensor],
    cfg: RunConfig,
    enabled: Sequence[str] = ALL_LOSSES,
) -> dict[str, torch.Tensor]:
    lc = cfg.loss
    bundle: dict[str, torch.Tensor] = {}
    if "text" in enabled:
        bundle["text"] = L.masked_text_loss(
            out.lm_logits, batch["labels"], batch["teacher_probs"], lc.temperature, lc.hard_label_mix
        )
    if {"depth_reg", "depth_ce", "depth_kl"} & set(enabled):
        d = L.depth_losses(
            out.depth_scalar,
            out.depth_bins,
            batch["depth"],
            batch["t_depth_bins"],
            out.depth_bins.shape[-1],
            batch["d_max"].view(-1, 1, 1, 1),
        )
        bundle.update({k: v for k, v in d.items() if k in enabled})
    if "detection" in enabled:
        bundle["detection"] = L.detection_loss(
            out.det_class_probs,
            out.det_boxes,
            batch["t_det"],
            batch["t_boxes"],
            lc.focal_gamma,
            lc.focal_alpha,
            batch["obj_mask"],
        )
    if "spatial" in enabled:
        bundle["spatial"] = L.spatial_corresponding_loss(
            out.spatial_features, batch["t_spatial"], lc.lambda_cross, lc.cross_view
        )
    if "multiview" in enabled:
        bundle["multiview"] = L.multiview_consistency(out.view_det_probs.flatten(-2))
    if "feature" in enabled:
        bundle["feature"] = L.feature_alignment(
            {
                "det": out.det_class_probs,
                "lr": out.rel_lr,
                "ab": out.rel_ab,
                "depth": out.depth_bins.mean(dim=(1, 2, 3)),
            },
            {
                "det": batch["t_det"],
                "lr": batch["t_lr"],
                "ab": batch["t_ab"],
                "depth": batch["t_depth_bins"].mean(dim=(1, 2, 3)),
            },
            batch["obj_mask"],
            batch["pair_mask"],
        )
    return {k: bundle[k] for k in ALL_LOSSES if k in bundle}


class Objective:
    """Combines a loss bundle with either learnable uncertainties or static weights."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.enabled = tuple(k for k in ALL_LOSSES if k in cfg.train.enabled_losses)
        self.uncertainty = L.UncertaintyParams(self.enabled) if cfg.train.loss_mode == "uncertainty" else None
        self.static = {k: cfg.loss.static_weights.get(k, 1.0) for k in self.enabled}

    def total(self, bundle: dict[str, torch.Tensor]) -> torch.Tensor:
        if self.uncertainty is not None:
            return L.uncertainty_total(bundle, self.uncertainty)
        return L.static_total(bundle, self.static)

    def weights(self) -> dict[str, float]:
        if self.uncertainty is not None:
            return self.uncertainty.weights()
        return dict(self.static)

    def __call__(self, model: Student, batch: dict[str, torch.Tensor]):
        bundle = compute_bundle(run_model(model, batch), batch, self.cfg, self.enabled)
        return self.total(bundle), bundle


# --------------------------------------------------------------------------
# run records and checkpoints


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    weight_trajectories: dict[str, list[float]] = field(default_factory=dict)
    steps: int = 0
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def save_checkpoint(path: Path, model: Student, objective: Objective, optimizer, cfg: RunConfig, state: dict) -> None:
    payload = {
        "run_config": cfg.to_dict(),
        "model_config": dataclasses.asdict(model.cfg),
        "model": model.state_dict(),
        "uncertainty": objective.uncertainty.state_dict() if objective.uncertainty is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "state": state,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path) -> tuple[Student, Objective, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    mcfg = payload["model_config"]
    mcfg = ModelConfig(**mcfg)
    cfg = RunConfig.from_dict(payload["run_config"])
    model = Student(mcfg)
    model.load_state_dict(payload["model"])
    model.eval()
    objective = Objective(cfg)
    if objective.uncertainty is not None and payload["uncertainty"] is not None:
        objective.uncertainty.load_state_dict(payload["uncertainty"])
    return model, objective, payload


@torch.no_grad()
def validate(model: Student, objective: Objective, batcher: Batcher, indices: Sequence[int], batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(indices), batch_size):
        chunk = list(indices[start : start + batch_size])
        value, _ = objective(model, batcher.batch(chunk))
        total += value.item() * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def train(
    ds: Dataset,
    cfg: RunConfig,
    out_dir: Optional[Path] = None,
    model: Optional[Student] = None,
) -> tuple[Student, Objective, RunRecord]:
    """Train a student on an 80/20 scene split; deterministic in ``cfg.train.seed``."""
    cfg.validate()
    tc = cfg.train
    torch.manual_seed(tc.seed)
    mcfg = model_config_for(ds.config, cfg.model, len(ds.vocab))
    if model is None:
        model = init_params(mcfg, tc.seed)
    batcher = Batcher(ds, model.cfg)
    train_idx, val_idx = ds.split(tc.val_frac, tc.seed)
    if not train_idx:
        raise ValueError("empty training split")
    objective = Objective(cfg)
    groups = [{"params": list(model.parameters()), "weight_decay": tc.weight_decay}]
    if objective.uncertainty is not None:
        groups.append({"params": list(objective.uncertainty.parameters()), "weight_decay": 0.0})
    optimizer = torch.optim.AdamW(groups, lr=tc.learning_rate)
    steps_per_epoch = math.ceil(len(train_idx) / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    warmup = tc.warmup_steps if tc.warmup_steps is not None else int(round(tc.warmup_frac * total_steps))
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_at(min(s, total_steps), total_steps, warmup, 1.0)
    )
    record = RunRecord(weight_trajectories={k: [] for k in objective.enabled})
    gen = torch.Generator().manual_seed(tc.seed)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.dump(out_dir / "config.yaml")
        log_fh = open(out_dir / "loss_log.jsonl", "w")
    t0 = time.perf_counter()
    step = 0
    since_best = 0
    try:
        for epoch in range(tc.epochs):
            model.train()
            order = torch.randperm(len(train_idx), generator=gen).tolist()
            epoch_sum, epoch_n = 0.0, 0
            for start in range(0, len(order), tc.batch_size):
                chunk = [train_idx[j] for j in order[start : start + tc.batch_size]]
                total, bundle = objective(model, batcher.batch(chunk))
                if not torch.isfinite(total):
                    dump = {k: v.item() for k, v in bundle.items()}
                    raise TrainingDivergedError(f"non-finite total loss at step {step}: {dump}")
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                if tc.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
                optimizer.step()
                scheduler.step()
                step += 1
                weights = objective.weights()
                for k, w in weights.items():
                    record.weight_trajectories[k].append(w)
                epoch_sum += total.item() * len(chunk)
                epoch_n += len(chunk)
                if log_fh is not None:
                    entry = {
                        "step": step,
                        "epoch": epoch + 1,
                        "lr": scheduler.get_last_lr()[0],
                        "total": total.item(),
                        "losses": {k: v.item() for k, v in bundle.items()},
                        "weights": weights,
                    }
                    log_fh.write(json.dumps(entry) + "\n")
            record.train_loss.append(epoch_sum / epoch_n)
            val = validate(model, objective, batcher, val_idx, tc.batch_size) if val_idx else record.train_loss[-1]
            record.val_loss.append(val)
            log.info("epoch %d train %.4f val %.4f", epoch + 1, record.train_loss[-1], val)
            state = {"step": step, "epoch": epoch + 1, "val_loss": val, "log_sigma": _log_sigma(objective)}
            if val < record.best_val_loss:
                record.best_val_loss = val
                record.best_epoch = epoch + 1
                since_best = 0
                if out_dir is not None:
                    save_checkpoint(out_dir / "checkpoints" / "best.pt", model, objective, optimizer, cfg, state)
            else:
                since_best += 1
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoints" / "last.pt", model, objective, optimizer, cfg, state)
            if tc.patience is not None and since_best >= tc.patience:
                log.info("early stopping after epoch %d", epoch + 1)
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    record.steps = step
    record.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        (out_dir / "run_record.json").write_text(json.dumps(record.to_dict(), indent=2))
    return model, objective, record


def _log_sigma(objective: Objective) -> dict[str, float]:
    if objective.uncertainty is None:
        return {}
    return {k: v.item() for k, v in objective.uncertainty.log_sigma.items()}
