"""Hidden-CoT input layout ``[V][T1..TK][Q][A]`` with answer-only labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

MASK = -100


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    """One sample's layout.

    ``input_ids`` has one entry per position; V and T positions carry -1
    because they are filled from embeddings, not the vocabulary.
    """

    K: int
    q_len: int
    a_len: int
    input_ids: np.ndarray
    label_ids: np.ndarray
    question_before_thinking: bool = False

    @property
    def total_len(self) -> int:
        return 1 + self.K + self.q_len + self.a_len

    def span(self, name: str) -> slice:
        """Offsets of the V, T, Q or A span."""
        k, q = self.K, self.q_len
        if self.question_before_thinking:
            starts = {"V": (0, 1), "Q": (1, 1 + q), "T": (1 + q, 1 + q + k)}
        else:
            starts = {"V": (0, 1), "T": (1, 1 + k), "Q": (1 + k, 1 + k + q)}
        starts["A"] = (1 + k + q, self.total_len)
        lo, hi = starts[name]
        return slice(lo, hi)

    def spans(self) -> dict[str, list[int]]:
        return {name: [self.span(name).start, self.span(name).stop] for name in "VTQA"}


def build_sequence(
    K: int,
    q_ids: Sequence[int],
    a_ids: Sequence[int] = (),
    max_len: int = 64,
    question_before_thinking: bool = False,
) -> TokenSequence:
    """Lay out one sample. ``a_ids`` is empty at inference time."""
    if K < 0:
        raise ValueError("K must be >= 0")
    if len(q_ids) == 0:
        raise ValueError("question is empty")
    total = 1 + K + len(q_ids) + len(a_ids)
    if total > max_len:
        raise SequenceTooLongError(
            f"sequence of length {total} (K={K}, |Q|={len(q_ids)}, |A|={len(a_ids)}) exceeds max length {max_len}"
        )
    ids = np.full(total, -1, dtype=np.int64)
    seq = TokenSequence(K, len(q_ids), len(a_ids), ids, np.full(total, MASK, dtype=np.int64), question_before_thinking)
    ids[seq.span("Q")] = q_ids
    ids[seq.span("A")] = a_ids
    seq.label_ids[seq.span("A")] = a_ids
    return seq


def causal_mask(total_len: int) -> torch.Tensor:
    """Boolean (L, L) mask; entry (i, j) is True when position i may attend to j."""
    if total_len < 1:
        raise ValueError("total_len must be >= 1")
    return torch.ones(total_len, total_len, dtype=torch.bool).tril()


def shift_labels(labels: torch.Tensor) -> torch.Tensor:
    """Targets for next-token prediction: logits at t are scored against labels at t+1."""
    pad = torch.full_like(labels[..., :1], MASK)
    return torch.cat([labels[..., 1:], pad], dim=-1)
