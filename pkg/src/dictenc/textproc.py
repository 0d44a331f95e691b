"""Whitespace tokenizer and vocabulary for the toy LM's text side."""

from __future__ import annotations

import json
import re
from typing import Iterable

# "," and ":" are split off so "glucose:NORMAL," gives glucose : NORMAL ,
_TOKEN_RE = re.compile(r"\[DSEP\]|[^\s,:]+|[,:]")

PAD, BOS, ANS, EOS, UNK = "<pad>", "<bos>", "<ans>", "<eos>", "<unk>"
TEXT_SPECIALS = (PAD, BOS, ANS, EOS, UNK)


def split_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class TextVocab:
    def __init__(self, tokens: Iterable[str]):
        self.itos = list(TEXT_SPECIALS)
        for tok in tokens:
            if tok not in TEXT_SPECIALS:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in text vocabulary")

    pad_id = 0
    bos_id = 1
    ans_id = 2
    eos_id = 3
    unk_id = 4

    def __len__(self):
        return len(self.itos)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "TextVocab":
        seen = set()
        for text in texts:
            seen.update(split_text(text))
        return cls(sorted(seen - set(TEXT_SPECIALS)))

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in split_text(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = [self.itos[i] for i in ids if i >= len(TEXT_SPECIALS) or i == self.unk_id]
        return " ".join(words).replace(" ,", ",").replace(" :", ":").replace(": ", ":")

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, items: list[str]) -> "TextVocab":
        if tuple(items[: len(TEXT_SPECIALS)]) != TEXT_SPECIALS:
            raise ValueError("text vocabulary must start with the special tokens")
        return cls(items[len(TEXT_SPECIALS):])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.itos, f, ensure_ascii=False)
