"""Word-level tokenizer for templated questions and answers."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile(r"[^\w\s]")


def normalize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, word: str) -> bool:
        return word in self.token_to_id

    def words(self, text: str) -> list[int]:
        """Ids for the words of ``text`` without BOS/EOS."""
        return [self.token_to_id.get(w, UNK) for w in normalize(text)]

    def encode(self, text: str) -> list[int]:
        return [BOS, *self.words(text), EOS]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.id_to_token[i] if 0 <= i < len(self) else SPECIALS[UNK])
        return " ".join(out)

    def missing(self, text: str) -> list[str]:
        return [w for w in normalize(text) if w not in self.token_to_id]

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls(Path(path).read_text().splitlines())


def build_vocab(corpus: Sequence[str]) -> Vocab:
    """Vocabulary ordered by descending frequency, ties broken lexicographically."""
    if not corpus:
        raise ValueError("corpus is empty")
    counts = Counter(w for line in corpus for w in normalize(line))
    for s in SPECIALS:
        counts.pop(s, None)
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab([*SPECIALS, *ordered])
