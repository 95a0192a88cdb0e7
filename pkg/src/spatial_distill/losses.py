"""Distillation objectives and the two ways of combining them.

Conventions: every KL is KL(teacher || student); entries with zero teacher
mass contribute nothing (0 log 0 = 0). Leading dimensions are batch-like and
averaged; trailing dimensions are reduced as each loss defines.
"""

from __future__ import annotations

import logging
import math
from typing import Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.special import xlogy

from .sequence import MASK, shift_labels

log = logging.getLogger(__name__)

PROB_TOL = 1e-4
LOG_FLOOR = 1e-12


def _kl_probs(p_teacher: torch.Tensor, q_student: torch.Tensor) -> torch.Tensor:
    """Elementwise KL summed over the last axis, from probabilities."""
    log_q = torch.log(q_student.clamp_min(LOG_FLOOR))
    return (xlogy(p_teacher, p_teacher) - p_teacher * log_q).sum(-1)


def _check_normalized(name: str, p: torch.Tensor) -> None:
    if p.numel() == 0:
        return
    dev = (p.sum(-1) - 1).abs().max().item()
    if dev > PROB_TOL or p.min().item() < -PROB_TOL:
        raise ValueError(f"{name} is not a probability distribution (max |sum - 1| = {dev:.3g})")


def _masked_mean(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return x.mean()
    mask = mask.to(x.dtype)
    return (x * mask).sum() / mask.sum().clamp_min(1)


# ----------------------------------------------------------------- text


def text_distill_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    tau: float,
    hard_labels: Optional[torch.Tensor] = None,
    hard_mix: float = 0.0,
) -> torch.Tensor:
    """tau^2 * mean over answer positions of KL(softmax(t/tau) || softmax(s/tau)).

    Inputs are (N, vocab) restricted to answer positions. Teacher logits may
    contain -inf (exact one-hot targets). With ``hard_mix`` > 0 the result is
    blended with cross-entropy against ``hard_labels``.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"answer position mismatch: student {tuple(student_logits.shape)} vs teacher {tuple(teacher_logits.shape)}"
        )
    log_p = F.log_softmax(teacher_logits / tau, dim=-1)
    log_q = F.log_softmax(student_logits / tau, dim=-1)
    p = log_p.exp()
    kl = (xlogy(p, p) - p * log_q).sum(-1).mean() * tau**2
    if hard_mix:
        ce = F.cross_entropy(student_logits, hard_labels)
        return (1 - hard_mix) * kl + hard_mix * ce
    return kl


def teacher_logits_from_probs(probs: torch.Tensor) -> torch.Tensor:
    return torch.log(probs)


def answer_positions(labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(logit positions, label positions) of every supervised answer token."""
    target = shift_labels(labels)
    rows, cols = (target != MASK).nonzero(as_tuple=True)
    return (rows, cols), (rows, cols + 1)


def masked_text_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    teacher_probs: torch.Tensor,
    tau: float,
    hard_mix: float = 0.0,
) -> torch.Tensor:
    """Text loss over full-length logits; positions labelled MASK are ignored.

    ``teacher_probs`` is aligned with ``labels`` (B, L, vocab); the logits at
    position t are scored against the teacher distribution at t + 1.
    """
    logit_pos, label_pos = answer_positions(labels)
    return text_distill_loss(
        logits[logit_pos],
        teacher_logits_from_probs(teacher_probs[label_pos]),
        tau,
        labels[label_pos],
        hard_mix,
    )


def hard_answer_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Plain causal-LM cross-entropy with MASK positions ignored."""
    return F.cross_entropy(logits.flatten(0, -2), shift_labels(labels).flatten(), ignore_index=MASK)


# ----------------------------------------------------------------- depth


def depth_losses(
    pred_scalar: torch.Tensor,
    pred_bins: torch.Tensor,
    gt_depth: torch.Tensor,
    teacher_bin_dist: torch.Tensor,
    bins: int,
    d_max,
) -> dict[str, torch.Tensor]:
    """L1 regression, CE against the ground-truth bin, KL against the teacher bins.

    ``d_max`` is a scalar or a tensor broadcastable against ``gt_depth``.
    """
    if pred_scalar.shape != gt_depth.shape or pred_bins.shape[:-1] != gt_depth.shape:
        raise ValueError("depth prediction and ground-truth shapes differ")
    d_max = torch.as_tensor(d_max, dtype=gt_depth.dtype)
    if (gt_depth < 0).any() or (gt_depth > d_max).any():
        log.warning("ground-truth depth outside [0, d_max]; clamping")
        gt_depth = torch.minimum(gt_depth.clamp_min(0), d_max)
    idx = torch.floor(gt_depth / d_max * bins).long().clamp(0, bins - 1)
    p_gt = pred_bins.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
    return {
        "depth_reg": (pred_scalar - gt_depth).abs().mean(),
        "depth_ce": -torch.log(p_gt.clamp_min(LOG_FLOOR)).mean(),
        "depth_kl": _kl_probs(teacher_bin_dist, pred_bins).mean(),
    }


# ----------------------------------------------------------------- detection


def detection_loss(
    det_class_probs: torch.Tensor,
    det_boxes: torch.Tensor,
    teacher_class_probs: torch.Tensor,
    gt_boxes: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    obj_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Focal term -alpha (1 - p_t)^gamma log p_t plus mean L1 box error, per object."""
    if det_class_probs.shape != teacher_class_probs.shape or det_boxes.shape != gt_boxes.shape:
        raise ValueError(
            f"object count mismatch: student {tuple(det_class_probs.shape)} vs teacher {tuple(teacher_class_probs.shape)}"
        )
    target = teacher_class_probs.argmax(-1, keepdim=True)
    p_t = det_class_probs.gather(-1, target).squeeze(-1)
    focal = -alpha * (1 - p_t) ** gamma * torch.log(p_t.clamp_min(LOG_FLOOR))
    box = (det_boxes - gt_boxes).abs().mean(-1)
    return _masked_mean(focal, obj_mask) + _masked_mean(box, obj_mask)


# ----------------------------------------------------------------- spatial


def _pooled(f: torch.Tensor) -> torch.Tensor:
    """(..., V, H, W, C) -> (..., V, C)."""
    return f.mean(dim=(-3, -2))


def cross_view_term(f_s: torch.Tensor, mode: str = "distance") -> torch.Tensor:
    """Sum over ordered view pairs v1 != v2 of D(pooled F_s^v1, pooled F_s^v2).

    ``distance``: mean squared distance (minimizing it pulls views together).
    ``cosine``: cosine similarity, the literal reading; can be negative.
    """
    pooled = _pooled(f_s)
    n_views = pooled.shape[-2]
    total = pooled.new_zeros(pooled.shape[:-2])
    for v1 in range(n_views):
        for v2 in range(n_views):
            if v1 == v2:
                continue
            a, b = pooled[..., v1, :], pooled[..., v2, :]
            if mode == "distance":
                total = total + ((a - b) ** 2).mean(-1)
            elif mode == "cosine":
                total = total + F.cosine_similarity(a, b, dim=-1)
            else:
                raise ValueError(mode)
    return total.mean()


def spatial_corresponding_loss(
    f_s: torch.Tensor,
    f_t: torch.Tensor,
    lambda_cross: float = 0.1,
    mode: str = "distance",
) -> torch.Tensor:
    """Per-cell squared alignment summed over (view, i, j) plus weighted cross-view term.

    Shapes (..., V, H, W, C); leading dims are averaged.
    """
    if f_s.shape != f_t.shape:
        raise ValueError(f"spatial feature shapes differ: {tuple(f_s.shape)} vs {tuple(f_t.shape)}")
    if f_s.dim() < 4 or f_s.shape[-4] < 1:
        raise ValueError("at least one view is required")
    align = ((f_s - f_t) ** 2).sum(dim=(-4, -3, -2, -1)).mean()
    if f_s.shape[-4] == 1 or lambda_cross == 0:
        return align
    return align + lambda_cross * cross_view_term(f_s, mode)


def multiview_consistency(preds: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of per-view prediction vectors over unordered view pairs.

    ``preds`` is (..., V, D).
    """
    n_views = preds.shape[-2]
    if n_views < 2:
        return preds.new_zeros(())
    diffs = [
        ((preds[..., i, :] - preds[..., j, :]) ** 2).mean(-1)
        for i in range(n_views)
        for j in range(i + 1, n_views)
    ]
    return torch.stack(diffs, dim=-1).mean()


def feature_alignment(
    student: Mapping[str, torch.Tensor],
    teacher: Mapping[str, torch.Tensor],
    obj_mask: Optional[torch.Tensor] = None,
    pair_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """KL(teacher || student) summed over detector classes, left/right and
    above/below relations, and the pooled depth-bin distribution.

    Expected keys: ``det`` (..., O, C), ``lr`` and ``ab`` (..., P, 2),
    ``depth`` (..., B). Object and pair terms are averaged over their masks.
    """
    total = None
    for key, mask in (("det", obj_mask), ("lr", pair_mask), ("ab", pair_mask), ("depth", None)):
        if key not in teacher:
            continue
        s, t = student[key], teacher[key]
        if s.shape != t.shape:
            raise ValueError(f"feature_alignment[{key}] shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
        _check_normalized(f"student {key}", s)
        _check_normalized(f"teacher {key}", t)
        term = _masked_mean(_kl_probs(t, s), mask)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("feature_alignment received no distributions")
    return total


# ----------------------------------------------------------------- totals


class UncertaintyParams(nn.Module):
    """Learnable log sigma per task, initialised at sigma = 1."""

    def __init__(self, tasks):
        super().__init__()
        self.log_sigma = nn.ParameterDict({t: nn.Parameter(torch.zeros(())) for t in tasks})

    def weight(self, task: str) -> torch.Tensor:
        return 0.5 * torch.exp(-2 * self.log_sigma[task])

    def weights(self) -> dict[str, float]:
        return {t: self.weight(t).item() for t in self.log_sigma}


def uncertainty_total(bundle: Mapping[str, torch.Tensor], params: UncertaintyParams) -> torch.Tensor:
    """sum_i L_i / (2 sigma_i^2) + log sigma_i."""
    missing = set(bundle) - set(params.log_sigma)
    if missing:
        raise KeyError(f"no uncertainty parameter for tasks {sorted(missing)}")
    return sum(params.weight(k) * v + params.log_sigma[k] for k, v in bundle.items())


def static_total(bundle: Mapping[str, torch.Tensor], weights: Mapping[str, float]) -> torch.Tensor:
    missing = set(bundle) - set(weights)
    if missing:
        raise KeyError(f"no static weight for tasks {sorted(missing)}")
    return sum(weights[k] * v for k, v in bundle.items())


def optimal_log_sigma(loss_value: float) -> float:
    """Closed-form minimiser of L / (2 sigma^2) + log sigma: sigma^2 = L."""
    return 0.5 * math.log(loss_value)
