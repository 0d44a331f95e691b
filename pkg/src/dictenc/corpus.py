"""Diagnosis samples and the JSON-lines corpus format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .eval_metrics import DIAGNOSIS_DELIMITER
from .report_model import LabReportSet, SchemaError, report_from_obj, report_to_obj


@dataclass(frozen=True)
class DiagnosisSample:
    report: LabReportSet
    patient_text: str
    diagnoses: tuple[str, ...] = field(default_factory=tuple)

    @property
    def target(self) -> str:
        return f"{DIAGNOSIS_DELIMITER} ".join(self.diagnoses)

    def to_obj(self) -> dict:
        obj = report_to_obj(self.report)
        obj["patient_text"] = self.patient_text
        obj["diagnoses"] = list(self.diagnoses)
        return obj

    @classmethod
    def from_obj(cls, obj, path="$") -> "DiagnosisSample":
        report = report_from_obj(obj, path)
        text = obj.get("patient_text", "")
        if not isinstance(text, str):
            raise SchemaError(f"{path}.patient_text", "expected a string")
        diag = obj.get("diagnoses", [])
        if not isinstance(diag, list) or not all(isinstance(d, str) for d in diag):
            raise SchemaError(f"{path}.diagnoses", "expected a list of strings")
        return cls(report, text, tuple(diag))


def write_corpus(samples: Iterable[DiagnosisSample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_obj(), ensure_ascii=False, sort_keys=True))
            f.write("\n")


def read_corpus(path) -> list[DiagnosisSample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}", f"invalid JSON: {exc}") from None
            out.append(DiagnosisSample.from_obj(obj, f"line {lineno}"))
    return out


def split_corpus(samples, split: str, train_fraction: float = 0.9):
    """Deterministic head/tail split; ``split`` is "train", "eval" or "all"."""
    cut = int(round(len(samples) * train_fraction))
    if split == "train":
        return samples[:cut]
    if split == "eval":
        return samples[cut:]
    if split == "all":
        return list(samples)
    raise ValueError(f"unknown split {split!r}")
