"""Rouge-L, Knowledge F1 and relative change for generated diagnoses."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .textproc import split_text

DIAGNOSIS_DELIMITER = ","


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def as_dict(self):
        return asdict(self)


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _tokens(seq):
    return split_text(seq) if isinstance(seq, str) else list(seq)


def rouge_l(candidate, reference) -> PRF:
    """Token-level Rouge-L. Strings are tokenized like the toy LM's text."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return PRF(0.0, 0.0, 0.0)
    lcs = lcs_length(cand, ref)
    p, r = lcs / len(cand), lcs / len(ref)
    return PRF(p, r, _f1(p, r))


def extract_diagnoses(text: str) -> set[str]:
    return {d.strip() for d in text.split(DIAGNOSIS_DELIMITER) if d.strip()}


def knowledge_f1(generated: Iterable[str], gold: Iterable[str]) -> PRF:
    gen, ref = set(generated), set(gold)
    if not gen or not ref:
        return PRF(0.0, 0.0, 0.0)
    hit = len(gen & ref)
    p, r = hit / len(gen), hit / len(ref)
    return PRF(p, r, _f1(p, r))


def relative_change(text_before, text_after) -> float:
    return 1.0 - rouge_l(text_before, text_after).f1


def _mean(rows: list[PRF]) -> dict:
    if not rows:
        return PRF(0.0, 0.0, 0.0).as_dict()
    k = len(rows)
    return PRF(
        sum(r.precision for r in rows) / k,
        sum(r.recall for r in rows) / k,
        sum(r.f1 for r in rows) / k,
    ).as_dict()


def evaluate_batch(
    generations: Sequence[str],
    references: Sequence[str],
    perturbed: Sequence[str] | None = None,
) -> dict:
    """Per-sample and corpus-mean metrics as a JSON-ready dict.

    ``perturbed`` holds generations for the perturbed inputs; when given, the
    metrics are computed on them and RC is measured against ``generations``.
    """
    if len(generations) != len(references):
        raise ValueError("generations and references differ in length")
    scored = generations if perturbed is None else perturbed
    samples, rouge_rows, know_rows, rcs = [], [], [], []
    for i, (gen, ref) in enumerate(zip(scored, references)):
        rl = rouge_l(gen, ref)
        kf = knowledge_f1(extract_diagnoses(gen), extract_diagnoses(ref))
        entry = {"index": i, "generated": gen, "reference": ref,
                 "rouge_l": rl.as_dict(), "knowledge": kf.as_dict()}
        if perturbed is not None:
            entry["unperturbed"] = generations[i]
            entry["rc"] = relative_change(generations[i], gen)
            rcs.append(entry["rc"])
        samples.append(entry)
        rouge_rows.append(rl)
        know_rows.append(kf)
    out = {"num_samples": len(samples), "rouge_l": _mean(rouge_rows), "knowledge": _mean(know_rows)}
    if perturbed is not None:
        out["rc"] = sum(rcs) / len(rcs) if rcs else 0.0
        out["rc_nonzero"] = sum(rc > 0 for rc in rcs)
    out["samples"] = samples
    return out
