"""Word-level vocabulary ranked by corpus frequency."""

from __future__ import annotations

import json
import re
from collections import Counter
from typing import Iterable

from ..errors import VocabError

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
SPECIAL_IDS = frozenset({PAD, CLS, SEP})

_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Vocab:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise VocabError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, indent=0)

    @classmethod
    def from_json(cls, text: str) -> Vocab:
        return cls(json.loads(text)["tokens"])


def build_vocab(lines: Iterable[str], max_size: int) -> Vocab:
    """Reserved tokens, then corpus tokens by descending count (ties alphabetical)."""
    counts = Counter(t for line in lines for t in tokenize(line))
    if not counts:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED):
        raise VocabError(f"max_size must be at least {len(RESERVED)}")
    ranked = sorted((t for t in counts if t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + ranked[: max_size - len(RESERVED)])
