"""Text, depth, spatial-relation and efficiency metrics.

Text metrics work on token lists (see ``tokenizer.normalize``). Corpus-level
numbers are plain means of per-sample scores, so they do not depend on the
order of the evaluation set.
"""

from __future__ import annotations

import io
import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import scene as sc
from .dataset import Dataset
from .model import Student, count_parameters
from .tokenizer import normalize
from .trainer import Batcher

SPATIAL = sc.SPATIAL_RELATIONS
STEM_SUFFIXES = ("ing", "es", "ed", "s")


# ----------------------------------------------------------------- text


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int) -> float:
    """Cumulative BLEU-n: geometric mean of clipped 1..n-gram precisions times
    the brevity penalty. Zero for an empty candidate or any zero precision."""
    if not candidate or not references:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        cand = ngrams(candidate, k)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        best: Counter = Counter()
        for ref in references:
            best |= ngrams(ref, k)
        clipped = sum(min(c, best[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / n
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def _prf(overlap: float, n_cand: int, n_ref: int) -> dict[str, float]:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f}


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: Sequence[str], reference: Sequence[str], variant: str) -> dict[str, float]:
    """ROUGE-1, ROUGE-2 (clipped n-gram overlap) or ROUGE-L (longest common subsequence)."""
    if variant == "l":
        return _prf(lcs_length(candidate, reference), len(candidate), len(reference))
    n = {"1": 1, "2": 2}[variant]
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))


def stem(word: str) -> str:
    for suf in STEM_SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def _align(candidate: Sequence[str], reference: Sequence[str]) -> list[tuple[int, int]]:
    """Exact matches first, then suffix-stem matches; each stage pairs every
    candidate word with the leftmost unused reference word of the same form."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for key in (lambda w: w, stem):
        for i, w in enumerate(candidate):
            if i in used_c:
                continue
            for j, r in enumerate(reference):
                if j not in used_r and key(w) == key(r):
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def meteor(candidate: Sequence[str], reference: Sequence[str], alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """METEOR variant with exact and suffix-stem matching.

    Fmean = P R / (alpha P + (1 - alpha) R). The fragmentation ratio is
    (chunks - 1) / (matches - 1), so a single contiguous match carries no
    penalty and identical strings score exactly 1.
    """
    pairs = _align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    chunks = 1 + sum(
        1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1)
    )
    frag = (chunks - 1) / (m - 1) if m > 1 else 0.0
    return fmean * (1 - gamma * frag**beta)


def text_metrics(candidates: Sequence[str], references: Sequence[str]) -> dict:
    """Mean per-sample BLEU-1..4, ROUGE-1/2/L (P/R/F) and METEOR."""
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    n = max(len(candidates), 1)
    out: dict = {f"bleu_{k}": 0.0 for k in range(1, 5)}
    for v in ("1", "2", "l"):
        out[f"rouge_{v}"] = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    out["meteor"] = 0.0
    for cand, ref in zip(candidates, references):
        c, r = normalize(cand), normalize(ref)
        for k in range(1, 5):
            out[f"bleu_{k}"] += bleu_n(c, [r], k) / n
        for v in ("1", "2", "l"):
            for key, val in rouge(c, r, v).items():
                out[f"rouge_{v}"][key] += val / n
        out["meteor"] += meteor(c, r) / n
    return out


# ----------------------------------------------------------------- depth


def depth_metrics(pred, gt) -> dict[str, float]:
    """RMSE and MAE over all cells; delta_1.25 over cells with positive ground truth."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    err = pred - gt
    valid = gt > 0
    ratio = np.maximum(pred[valid] / gt[valid], gt[valid] / np.where(pred[valid] > 0, pred[valid], np.nan))
    hits = np.nan_to_num(ratio, nan=np.inf) < 1.25
    return {
        "rmse": float(np.sqrt((err**2).mean())) if err.size else 0.0,
        "mae": float(np.abs(err).mean()) if err.size else 0.0,
        "delta_1.25": float(hits.mean()) if hits.size else 0.0,
        "excluded_cells": int((~valid).sum()),
    }


# ----------------------------------------------------------------- spatial


def spatial_accuracy(answers: Sequence[str], samples: Sequence[sc.QASample]) -> dict:
    """Per-category accuracy of templated answers against the oracle answers.

    Unparseable answers count as wrong and are tallied per category. Overall
    is the mean of the category accuracies (categories without samples are
    left out of the mean and reported as None).
    """
    if len(answers) != len(samples):
        raise ValueError("answer and sample counts differ")
    right: Counter = Counter()
    total: Counter = Counter()
    unparseable: Counter = Counter()
    for text, qa in zip(answers, samples):
        if qa.relation not in SPATIAL:
            continue
        total[qa.relation] += 1
        got = sc.parse_answer(qa.relation, text)
        if got is None:
            unparseable[qa.relation] += 1
        elif got == sc.parse_answer(qa.relation, qa.answer_text):
            right[qa.relation] += 1
    out: dict = {rel: (right[rel] / total[rel] if total[rel] else None) for rel in SPATIAL}
    present = [out[rel] for rel in SPATIAL if out[rel] is not None]
    out["overall"] = float(np.mean(present)) if present else 0.0
    out["counts"] = {rel: total[rel] for rel in SPATIAL}
    out["unparseable"] = {rel: unparseable[rel] for rel in SPATIAL}
    n = sum(total.values())
    out["unparseable_fraction"] = sum(unparseable.values()) / n if n else 0.0
    return out


def relative_to(student: dict, teacher: dict) -> dict:
    """Student accuracy divided by teacher accuracy, per category and overall."""
    keys = (*SPATIAL, "overall")
    return {k: (student[k] / teacher[k] if student.get(k) is not None and teacher.get(k) else None) for k in keys}


# ----------------------------------------------------------------- efficiency


def model_bytes(model: torch.nn.Module) -> int:
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.getbuffer().nbytes


# efficiency fields that depend on wall-clock time
TIMING_KEYS = ("mean_latency_ms", "throughput")


def efficiency_report(
    model: Student,
    batch: Sequence[tuple[torch.Tensor, torch.Tensor, list[int]]],
    reference_params: Optional[int] = None,
    runs: int = 20,
    max_new_tokens: int = 16,
) -> dict:
    """Parameter count, serialized size and warm per-sample generation latency.

    ``batch`` holds (features, depth, question ids) triples. ``ratio`` is
    reference_params / param_count, 1.0 when no reference is configured.
    """
    runs = max(runs, 20)
    n_params = count_parameters(model)
    latency = 0.0
    if batch:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            f, d, q = batch[0]
            model.generate(f, d, q, max_new_tokens)  # warm-up
            start = time.perf_counter()
            for i in range(runs):
                f, d, q = batch[i % len(batch)]
                model.generate(f, d, q, max_new_tokens)
            latency = (time.perf_counter() - start) / runs
        model.train(was_training)
    ref = reference_params if reference_params else n_params
    return {
        "param_count": n_params,
        "model_bytes": model_bytes(model),
        "mean_latency_ms": latency * 1000,
        "throughput": 1.0 / latency if latency > 0 else 0.0,
        "ratio": ref / n_params,
        "runs": runs,
    }


def length_normalized(report: dict) -> dict:
    """ROUGE-1 F1 per candidate word; zero and flagged when candidates are empty."""
    words = report["length"]["mean_candidate_words"]
    r1 = report["rouge_1"]["f1"]
    if words <= 0:
        return {"rouge_1_per_word": 0.0, "empty_candidates": True}
    return {"rouge_1_per_word": r1 / words, "empty_candidates": False}


# ----------------------------------------------------------------- report


@dataclass
class MetricsReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_1: dict
    rouge_2: dict
    rouge_l: dict
    meteor: float
    depth: dict
    spatial: dict
    spatial_teacher_relative: dict
    efficiency: dict
    length: dict
    n_samples: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: Path) -> None:
        Path(path).write_text(self.dumps() + "\n")


def build_report(
    candidates: Sequence[str],
    samples: Sequence[sc.QASample],
    depth_pred=None,
    depth_gt=None,
    efficiency: Optional[dict] = None,
) -> MetricsReport:
    """Assemble a report from answers; the teacher's own answers serve as references."""
    refs = [qa.answer_text for qa in samples]
    text = text_metrics(candidates, refs)
    spatial = spatial_accuracy(candidates, samples)
    teacher = spatial_accuracy(refs, samples)
    n = len(candidates)
    length = {
        "mean_candidate_words": sum(len(normalize(c)) for c in candidates) / n if n else 0.0,
        "mean_reference_words": sum(len(normalize(r)) for r in refs) / n if n else 0.0,
    }
    depth = depth_metrics(depth_pred, depth_gt) if depth_pred is not None else {}
    report = MetricsReport(
        **text,
        depth=depth,
        spatial=spatial,
        spatial_teacher_relative=relative_to(spatial, teacher),
        efficiency=efficiency or {},
        length=length,
        n_samples=n,
    )
    length.update(length_normalized(report.to_dict()))
    return report


def qualitative_rows(candidates: Sequence[str], samples: Sequence[sc.QASample], sample_ids: Sequence[int]) -> list[dict]:
    """Side-by-side teacher/student answers with per-sample scores."""
    rows = []
    for sid, cand, qa in zip(sample_ids, candidates, samples):
        c, r = normalize(cand), normalize(qa.answer_text)
        rows.append(
            {
                "sample_id": int(sid),
                "relation": qa.relation,
                "question": qa.question_text,
                "teacher": qa.answer_text,
                "student": cand,
                "bleu_1": bleu_n(c, [r], 1),
                "rouge_1_f1": rouge(c, r, "1")["f1"],
                "meteor": meteor(c, r),
                "correct": (
                    sc.parse_answer(qa.relation, cand) == sc.parse_answer(qa.relation, qa.answer_text)
                    if qa.relation in SPATIAL
                    else None
                ),
            }
        )
    return rows


@torch.no_grad()
def generate_answers(model: Student, ds: Dataset, indices: Sequence[int], max_new_tokens: int = 16) -> list[str]:
    model.eval()
    batcher = Batcher(ds, model.cfg)
    answers = []
    for i in indices:
        rec = ds.scenes[ds.samples[i].scene_index]
        ids = model.generate(
            torch.as_tensor(rec.features, dtype=torch.float32),
            torch.as_tensor(rec.depth, dtype=torch.float32),
            batcher.question_ids(i),
            max_new_tokens,
        )
        answers.append(ds.vocab.decode(ids))
    return answers


@torch.no_grad()
def predict_depth(model: Student, ds: Dataset, scene_indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    if not scene_indices:
        return np.zeros(0), np.zeros(0)
    f = torch.as_tensor(np.stack([ds.scenes[i].features for i in scene_indices]), dtype=torch.float32)
    d = torch.as_tensor(np.stack([ds.scenes[i].depth for i in scene_indices]), dtype=torch.float32)
    vision, per_view = model.vision(f, d)
    pred = model.heads(vision, per_view)["depth_scalar"]
    return pred.numpy(), d.numpy()


def evaluate_model(
    model: Student,
    ds: Dataset,
    indices: Sequence[int],
    max_new_tokens: int = 16,
    latency_runs: int = 20,
    reference_params: Optional[int] = None,
    answers: Optional[Sequence[str]] = None,
) -> tuple[MetricsReport, list[dict]]:
    """Generate answers for ``indices`` (unless given) and score everything."""
    indices = list(indices)
    if answers is None:
        answers = generate_answers(model, ds, indices, max_new_tokens)
    samples = [ds.samples[i].qa for i in indices]
    scenes = sorted({ds.samples[i].scene_index for i in indices})
    pred, gt = predict_depth(model, ds, scenes)
    batcher = Batcher(ds, model.cfg)
    eff_batch = [
        (
            torch.as_tensor(ds.scenes[ds.samples[i].scene_index].features, dtype=torch.float32),
            torch.as_tensor(ds.scenes[ds.samples[i].scene_index].depth, dtype=torch.float32),
            batcher.question_ids(i),
        )
        for i in indices[:latency_runs]
    ]
    eff = efficiency_report(model, eff_batch, reference_params, latency_runs, max_new_tokens)
    report = build_report(answers, samples, pred, gt, eff)
    return report, qualitative_rows(answers, samples, indices)
