"""Whitespace word tokenizer with a closed vocabulary.

Feeds the toy decoder and the trainer. Real deployments would swap in a
subword tokenizer; everything downstream only needs encode/decode and the
four special ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, InputError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


@dataclass(frozen=True)
class ToyTokenizer:
    """Word-level tokenizer over a fixed, sorted vocabulary."""

    words: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.words[:4]) != SPECIALS:
            raise ConfigError("vocabulary must start with the special tokens")
        if len(set(self.words)) != len(self.words):
            raise ConfigError("vocabulary contains duplicates")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def from_texts(cls, texts) -> "ToyTokenizer":
        seen = set()
        for text in texts:
            seen.update(text.split())
        seen -= set(SPECIALS)
        return cls(words=SPECIALS + tuple(sorted(seen)))

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    def encode(self, text: str, add_bos: bool = False,
               add_eos: bool = False) -> list[int]:
        ids = [self._index.get(w, UNK) for w in text.split()]
        if add_bos:
            ids.insert(0, BOS)
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids, skip_special: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.words):
                raise InputError(f"token id {i} outside vocabulary of {len(self.words)}")
            if skip_special and i < len(SPECIALS):
                continue
            words.append(self.words[i])
        return " ".join(words)
