"""Token-id conventions shared by the corpus, models, and losses."""

from __future__ import annotations

from dataclasses import dataclass

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_RESERVED = 3


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-id space with fixed reserved ids PAD=0, BOS=1, EOS=2."""

    size: int

    def __post_init__(self):
        if self.size < N_RESERVED + 1:
            raise VocabularyError(f"vocabulary needs at least {N_RESERVED + 1} tokens, got {self.size}")

    @property
    def n_content(self) -> int:
        return self.size - N_RESERVED

    def content_ids(self):
        return range(N_RESERVED, self.size)

    def is_content(self, token_id: int) -> bool:
        return N_RESERVED <= token_id < self.size


def strip_specials(tokens) -> list[int]:
    """Content tokens up to the first EOS/PAD."""
    out = []
    for t in tokens:
        t = int(t)
        if t in (EOS_ID, PAD_ID):
            break
        if t != BOS_ID:
            out.append(t)
    return out
