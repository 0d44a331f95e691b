"""Lab report domain types, value binning and the JSON record codec."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np


class SchemaError(ValueError):
    """Raised when a JSON record does not match the report schema.

    ``path`` points at the offending field, e.g. ``dictionaries[0].pairs[2].num``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnmappableValueError(ValueError):
    def __init__(self, text: str):
        super().__init__(f"no medical label for qualitative value {text!r}")
        self.text = text


class MedicalLabel(enum.Enum):
    NORMAL = "NORMAL"
    ABNORMAL = "ABNORMAL"
    HI_NORMAL = "HI_NORMAL"
    LT_NORMAL = "LT_NORMAL"
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"
    POSITIVE_PLUS = "POSITIVE_PLUS"
    POSITIVE_PLUS_PLUS = "POSITIVE_PLUS_PLUS"
    POSITIVE_MINUS = "POSITIVE_MINUS"
    SENSITIVE = "SENSITIVE"
    RESISTANT = "RESISTANT"
    INTERMEDIATE = "INTERMEDIATE"

    @property
    def token(self) -> str:
        return f"[{self.value}]"


# Lookup is applied to the stripped, lower-cased text.
DEFAULT_QUALITATIVE_LABELS: dict[str, MedicalLabel] = {
    "normal": MedicalLabel.NORMAL,
    "abnormal": MedicalLabel.ABNORMAL,
    "hi normal": MedicalLabel.HI_NORMAL,
    "lt normal": MedicalLabel.LT_NORMAL,
    "high": MedicalLabel.HI_NORMAL,
    "low": MedicalLabel.LT_NORMAL,
    "positive": MedicalLabel.POSITIVE,
    "pos": MedicalLabel.POSITIVE,
    "negative": MedicalLabel.NEGATIVE,
    "neg": MedicalLabel.NEGATIVE,
    "-": MedicalLabel.NEGATIVE,
    "positive+": MedicalLabel.POSITIVE_PLUS,
    "+": MedicalLabel.POSITIVE_PLUS,
    "positive++": MedicalLabel.POSITIVE_PLUS_PLUS,
    "++": MedicalLabel.POSITIVE_PLUS_PLUS,
    "positive-": MedicalLabel.POSITIVE_MINUS,
    "+-": MedicalLabel.POSITIVE_MINUS,
    "±": MedicalLabel.POSITIVE_MINUS,
    "sensitive": MedicalLabel.SENSITIVE,
    "senstive": MedicalLabel.SENSITIVE,
    "resistant": MedicalLabel.RESISTANT,
    "intermediate": MedicalLabel.INTERMEDIATE,
}
for _label in MedicalLabel:
    DEFAULT_QUALITATIVE_LABELS.setdefault(_label.value.lower(), _label)
    DEFAULT_QUALITATIVE_LABELS.setdefault(_label.value.lower().replace("_", " "), _label)
    DEFAULT_QUALITATIVE_LABELS.setdefault(_label.token.lower(), _label)


@dataclass(frozen=True)
class LabValue:
    """A single test result.

    Numeric results may carry an ``abnormal_flag`` (the lab's own "*" marker);
    it only matters when no reference bounds are known.
    """

    kind: str  # "numeric" | "qualitative"
    numeric_value: float | None = None
    reference_low: float | None = None
    reference_high: float | None = None
    qualitative_text: str | None = None
    abnormal_flag: bool = False

    def __post_init__(self):
        if self.kind == "numeric":
            if self.numeric_value is None or self.qualitative_text is not None:
                raise ValueError("numeric value needs numeric_value and no qualitative_text")
        elif self.kind == "qualitative":
            if self.qualitative_text is None or self.numeric_value is not None:
                raise ValueError("qualitative value needs qualitative_text and no numeric_value")
            if self.reference_low is not None or self.reference_high is not None:
                raise ValueError("qualitative value cannot carry reference bounds")
        else:
            raise ValueError(f"unknown value kind {self.kind!r}")
        if (
            self.reference_low is not None
            and self.reference_high is not None
            and self.reference_low > self.reference_high
        ):
            raise ValueError("reference_low > reference_high")

    @classmethod
    def numeric(cls, value, lo=None, hi=None, flagged=False) -> "LabValue":
        return cls(
            "numeric",
            numeric_value=float(value),
            reference_low=None if lo is None else float(lo),
            reference_high=None if hi is None else float(hi),
            abnormal_flag=flagged,
        )

    @classmethod
    def qualitative(cls, text: str) -> "LabValue":
        return cls("qualitative", qualitative_text=text)


@dataclass(frozen=True)
class KeyValuePair:
    key: str
    value: LabValue

    def __post_init__(self):
        if not self.key.strip():
            raise ValueError("key must be non-empty")


@dataclass(frozen=True)
class LabDictionary:
    pairs: tuple[KeyValuePair, ...]
    kind_tag: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise ValueError("a lab dictionary needs at least one pair")


@dataclass(frozen=True)
class LabReportSet:
    dictionaries: tuple[LabDictionary, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dictionaries", tuple(self.dictionaries))

    @property
    def num_pairs(self) -> int:
        return sum(len(d.pairs) for d in self.dictionaries)


def bin_value(
    value: LabValue, lookup: Mapping[str, MedicalLabel] | None = None
) -> MedicalLabel:
    """Map a lab value to its medical label.

    Numeric values are placed relative to the closed reference interval; a
    value sitting exactly on a bound is NORMAL. Without any bound the lab's
    abnormal flag decides between NORMAL and ABNORMAL. Qualitative values go
    through ``lookup`` (defaults to ``DEFAULT_QUALITATIVE_LABELS``).
    """
    if value.kind == "qualitative":
        table = DEFAULT_QUALITATIVE_LABELS if lookup is None else lookup
        key = value.qualitative_text.strip().lower()
        if key not in table:
            raise UnmappableValueError(value.qualitative_text)
        return table[key]

    x = value.numeric_value
    lo, hi = value.reference_low, value.reference_high
    if lo is None and hi is None:
        return MedicalLabel.ABNORMAL if value.abnormal_flag else MedicalLabel.NORMAL
    if hi is not None and x > hi:
        return MedicalLabel.HI_NORMAL
    if lo is not None and x < lo:
        return MedicalLabel.LT_NORMAL
    return MedicalLabel.NORMAL


# JSON codec -----------------------------------------------------------------

_PAIR_FIELDS = {"key", "num", "lo", "hi", "text", "flag"}


def _number(obj, path):
    if obj is None:
        return None
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise SchemaError(path, f"expected a number, got {type(obj).__name__}")
    return float(obj)


def _parse_pair(obj, path) -> KeyValuePair:
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    extra = set(obj) - _PAIR_FIELDS
    if extra:
        raise SchemaError(f"{path}.{sorted(extra)[0]}", "unknown field")
    key = obj.get("key")
    if not isinstance(key, str) or not key.strip():
        raise SchemaError(f"{path}.key", "expected a non-empty string")
    num = _number(obj.get("num"), f"{path}.num")
    lo = _number(obj.get("lo"), f"{path}.lo")
    hi = _number(obj.get("hi"), f"{path}.hi")
    text = obj.get("text")
    flag = obj.get("flag", False)
    if not isinstance(flag, bool):
        raise SchemaError(f"{path}.flag", "expected a boolean")
    if text is not None and not isinstance(text, str):
        raise SchemaError(f"{path}.text", "expected a string")
    if num is not None and text is not None:
        raise SchemaError(f"{path}.text", "'num' and 'text' are mutually exclusive")
    if num is None and text is None:
        raise SchemaError(f"{path}.num", "one of 'num' or 'text' is required")
    if num is None and (lo is not None or hi is not None or flag):
        raise SchemaError(f"{path}.lo", "reference bounds and flag need 'num'")
    if lo is not None and hi is not None and lo > hi:
        raise SchemaError(f"{path}.lo", "lo exceeds hi")
    if num is not None:
        value = LabValue.numeric(num, lo, hi, flagged=flag)
    else:
        value = LabValue.qualitative(text)
    return KeyValuePair(key, value)


def report_from_obj(obj: Any, path: str = "$") -> LabReportSet:
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    dicts = obj.get("dictionaries")
    if not isinstance(dicts, list):
        raise SchemaError(f"{path}.dictionaries", "expected a list")
    out = []
    for i, d in enumerate(dicts):
        dpath = f"{path}.dictionaries[{i}]"
        if not isinstance(d, dict):
            raise SchemaError(dpath, "expected an object")
        kind = d.get("kind")
        if kind is not None and not isinstance(kind, str):
            raise SchemaError(f"{dpath}.kind", "expected a string")
        pairs = d.get("pairs")
        if not isinstance(pairs, list) or not pairs:
            raise SchemaError(f"{dpath}.pairs", "expected a non-empty list")
        out.append(
            LabDictionary(
                tuple(_parse_pair(p, f"{dpath}.pairs[{j}]") for j, p in enumerate(pairs)),
                kind_tag=kind,
            )
        )
    return LabReportSet(tuple(out))


def _pair_to_obj(pair: KeyValuePair) -> dict:
    v = pair.value
    obj: dict[str, Any] = {"key": pair.key}
    if v.kind == "numeric":
        obj["num"] = v.numeric_value
        if v.reference_low is not None:
            obj["lo"] = v.reference_low
        if v.reference_high is not None:
            obj["hi"] = v.reference_high
        if v.abnormal_flag:
            obj["flag"] = True
    else:
        obj["text"] = v.qualitative_text
    return obj


def report_to_obj(report: LabReportSet) -> dict:
    out = []
    for d in report.dictionaries:
        entry: dict[str, Any] = {}
        if d.kind_tag is not None:
            entry["kind"] = d.kind_tag
        entry["pairs"] = [_pair_to_obj(p) for p in d.pairs]
        out.append(entry)
    return {"dictionaries": out}


def parse_report(text: str) -> LabReportSet:
    """Parse one JSON record (the ``dictionaries`` part of a corpus line)."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return report_from_obj(obj)


def serialize_report(report: LabReportSet) -> str:
    return json.dumps(report_to_obj(report), ensure_ascii=False)


# Perturbation ---------------------------------------------------------------

def perturb(report: LabReportSet, seed: int) -> LabReportSet:
    """Shuffle pairs inside every dictionary and then the dictionary order.

    Uses numpy's PCG64 bit generator so a given seed reproduces the same
    permutation on every platform.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    shuffled = []
    for d in report.dictionaries:
        order = rng.permutation(len(d.pairs))
        shuffled.append(LabDictionary(tuple(d.pairs[i] for i in order), d.kind_tag))
    order = rng.permutation(len(shuffled))
    return LabReportSet(tuple(shuffled[i] for i in order))
