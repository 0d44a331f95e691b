"""Turn a lab report into encoder token ids with pair-local positions.

Layout for a report with ``k`` dictionaries::

    [CLS] key_11 val_11 ... key_1m val_1m [SEP] ... key_k1 val_k1 ... [SEP]

Every key-value pair contributes exactly two tokens. Positional ids restart
at 0 on each key, so reordering pairs inside a dictionary only reorders
(token, position, segment) triples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .report_model import LabReportSet, MedicalLabel, bin_value

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, UNK)
LABEL_TOKENS = tuple(label.token for label in MedicalLabel)
# Ids 0-15 are fixed: the four specials then the labels in enum order.
RESERVED_TOKENS = SPECIAL_TOKENS + LABEL_TOKENS
PAD_ID, CLS_ID, SEP_ID, UNK_ID = range(4)
NUM_RESERVED = len(RESERVED_TOKENS)


class Vocabulary:
    def __init__(self, token_to_id: Mapping[str, int]):
        self.token_to_id = dict(token_to_id)
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense from 0")
        for i, tok in enumerate(RESERVED_TOKENS):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"reserved token {tok} must have id {i}")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def lookup(self, idx: int) -> str:
        return self.id_to_token[idx]

    def label_id(self, label: MedicalLabel) -> int:
        return self.token_to_id[label.token]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.token_to_id, f, ensure_ascii=False, indent=0)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.token_to_id == other.token_to_id


def build_vocab(corpus: Iterable[LabReportSet]) -> Vocabulary:
    """Reserved block plus one id per distinct key string (sorted)."""
    keys = set()
    seen = False
    for report in corpus:
        seen = True
        for d in report.dictionaries:
            keys.update(p.key for p in d.pairs)
    if not seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    table = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    for key in sorted(keys - set(table)):
        table[key] = len(table)
    return Vocabulary(table)


@dataclass(frozen=True)
class EncodedReport:
    token_ids: np.ndarray
    group_pos_ids: np.ndarray
    segment_ids: np.ndarray
    is_special: np.ndarray

    def __post_init__(self):
        n = len(self.token_ids)
        if not (len(self.group_pos_ids) == len(self.segment_ids) == len(self.is_special) == n):
            raise ValueError("encoded sequences must have equal length")

    def __len__(self):
        return len(self.token_ids)

    @property
    def num_dictionaries(self) -> int:
        # [CLS] carries the reserved segment k
        return int(self.segment_ids[0])

    def pair_ids(self) -> np.ndarray:
        """Index of the key-value pair each token belongs to, -1 for specials."""
        out = np.full(len(self), -1, dtype=np.int64)
        pair = -1
        run = 0
        for i, special in enumerate(self.is_special):
            if special:
                run = 0
                continue
            if run % 2 == 0:
                pair += 1
            out[i] = pair
            run += 1
        return out


def tokenize(report: LabReportSet, vocab: Vocabulary, lookup=None) -> EncodedReport:
    k = len(report.dictionaries)
    tokens, positions, segments, special = [CLS_ID], [0], [k], [True]
    for i, d in enumerate(report.dictionaries):
        for pair in d.pairs:
            label = bin_value(pair.value, lookup)
            tokens += [vocab.id_of(pair.key), vocab.label_id(label)]
            positions += [0, 1]
            segments += [i, i]
            special += [False, False]
        tokens.append(SEP_ID)
        positions.append(0)
        segments.append(i)
        special.append(True)
    return EncodedReport(
        np.asarray(tokens, dtype=np.int64),
        np.asarray(positions, dtype=np.int64),
        np.asarray(segments, dtype=np.int64),
        np.asarray(special, dtype=bool),
    )


def group_positions(encoded: EncodedReport) -> np.ndarray:
    """Pair-local positions: 0 on keys, 1 on values, 0 on [CLS]/[SEP]."""
    pos = np.zeros(len(encoded), dtype=np.int64)
    pair = encoded.pair_ids()
    for i in range(1, len(encoded)):
        if pair[i] >= 0 and pair[i] == pair[i - 1]:
            pos[i] = pos[i - 1] + 1
    return pos


def sequential_positions(encoded: EncodedReport) -> np.ndarray:
    return np.arange(len(encoded), dtype=np.int64)
