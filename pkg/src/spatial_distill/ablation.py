"""Loss-component and thinking-token sweeps over a shared dataset."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import ALL_LOSSES, RunConfig, expand_losses
from .dataset import Dataset
from .evaluator import evaluate_model
from .trainer import train

log = logging.getLogger(__name__)

K_SWEEP = (2, 4, 8, 16)


@dataclass
class Variant:
    name: str
    K: Optional[int] = None
    disable: tuple[str, ...] = ()
    loss_mode: Optional[str] = None

    def apply(self, base: RunConfig) -> RunConfig:
        cfg = copy.deepcopy(base)
        if self.K is not None:
            cfg.model.K = self.K
        if self.disable:
            off = expand_losses(self.disable)
            cfg.train.enabled_losses = tuple(k for k in cfg.train.enabled_losses if k not in off)
        if self.loss_mode is not None:
            cfg.train.loss_mode = self.loss_mode
        return cfg


def loss_rows(base_k: int = 8) -> list[Variant]:
    """Loss-component rows: a plain baseline without thinking tokens, the full
    system, one row per removed component and a static-weight row."""
    return [
        Variant("Baseline", K=0),
        Variant("+Hidden CoT", K=base_k),
        Variant("No Detection", K=base_k, disable=("detection",)),
        Variant("No Depth", K=base_k, disable=("depth",)),
        Variant("No Spatial Loss", K=base_k, disable=("spatial",)),
        Variant("No Multi-view", K=base_k, disable=("multiview",)),
        Variant("No Feature Distill", K=base_k, disable=("feature",)),
        Variant("Static Weights", K=base_k, loss_mode="static"),
    ]


def k_rows(ks: Sequence[int] = K_SWEEP) -> list[Variant]:
    return [Variant(f"K={k}", K=k) for k in ks]


@dataclass
class AblationRow:
    table: str
    name: str
    K: int
    loss_mode: str
    enabled_losses: list[str]
    best_val_loss: float
    best_epoch: int
    rouge_1: float
    spatial_overall: float
    depth_rmse: Optional[float]
    extra: dict = field(default_factory=dict)


def run_variant(ds: Dataset, base: RunConfig, variant: Variant, table: str, out_dir: Optional[Path]) -> AblationRow:
    cfg = variant.apply(base)
    run_dir = None if out_dir is None else Path(out_dir) / table / _slug(variant.name)
    model, _, record = train(ds, cfg, run_dir)
    _, val_idx = ds.split(cfg.train.val_frac, cfg.train.seed)
    report, _ = evaluate_model(
        model, ds, val_idx, cfg.eval.max_new_tokens, cfg.eval.latency_runs, cfg.eval.reference_params
    )
    if run_dir is not None:
        report.save(run_dir / "metrics.json")
    log.info("%s/%s best val %.4f", table, variant.name, record.best_val_loss)
    return AblationRow(
        table=table,
        name=variant.name,
        K=cfg.model.K,
        loss_mode=cfg.train.loss_mode,
        enabled_losses=[k for k in ALL_LOSSES if k in cfg.train.enabled_losses],
        best_val_loss=record.best_val_loss,
        best_epoch=record.best_epoch,
        rouge_1=report.rouge_1["f1"],
        spatial_overall=report.spatial["overall"],
        depth_rmse=report.depth.get("rmse"),
        extra={"train_loss": record.train_loss, "val_loss": record.val_loss},
    )


def ablate(
    ds: Dataset,
    base: RunConfig,
    out_dir: Optional[Path] = None,
    tables: Sequence[str] = ("loss", "k"),
    ks: Sequence[int] = K_SWEEP,
) -> dict[str, list[AblationRow]]:
    """Run the requested tables; writes ablation.json and ablation.md when ``out_dir`` is set."""
    result: dict[str, list[AblationRow]] = {}
    if "loss" in tables:
        result["loss"] = [run_variant(ds, base, v, "loss", out_dir) for v in loss_rows(base.model.K or 8)]
    if "k" in tables:
        result["k"] = [run_variant(ds, base, v, "k", out_dir) for v in k_rows(ks)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(
            json.dumps({t: [r.__dict__ for r in rows] for t, rows in result.items()}, indent=2)
        )
        (out / "ablation.md").write_text(markdown(result))
    return result


def markdown(result: dict[str, list[AblationRow]]) -> str:
    titles = {"loss": "Loss components", "k": "Thinking tokens"}
    lines = []
    for table, rows in result.items():
        lines += [f"## {titles.get(table, table)}", ""]
        lines.append("| Configuration | K | Best Val Loss | ROUGE-1 | Spatial Acc | Depth RMSE |")
        lines.append("|---|---|---|---|---|---|")
        for r in rows:
            rmse = "n/a" if r.depth_rmse is None else f"{r.depth_rmse:.4f}"
            lines.append(
                f"| {r.name} | {r.K} | {r.best_val_loss:.4f} | {r.rouge_1:.4f} | {r.spatial_overall:.4f} | {rmse} |"
            )
        lines.append("")
    return "\n".join(lines)


def _slug(name: str) -> str:
    return "".join(c.lower() if c.isalnum() else "_" for c in name).strip("_")
