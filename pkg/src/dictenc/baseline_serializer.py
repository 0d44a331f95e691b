"""Text-serialization baseline: flatten a report into a fixed template.

Pairs render as ``key:LABEL`` joined by ", " inside a dictionary, and
dictionaries are joined by " [DSEP] ". Labels use their bare names.
"""

from __future__ import annotations

from .report_model import LabReportSet, bin_value

DICT_SEPARATOR = "[DSEP]"


def serialize(report: LabReportSet, lookup=None) -> str:
    parts = []
    for d in report.dictionaries:
        parts.append(", ".join(f"{p.key}:{bin_value(p.value, lookup).value}" for p in d.pairs))
    return f" {DICT_SEPARATOR} ".join(parts)


def serialize_pairs(report: LabReportSet, lookup=None) -> list[list[str]]:
    """Per-pair token groups in serialization order, separators attached.

    Used for pair-granular truncation: dropping trailing groups keeps a
    well-formed prefix of ``serialize(report)``.
    """
    groups = []
    for i, d in enumerate(report.dictionaries):
        for j, p in enumerate(d.pairs):
            toks = []
            if j > 0:
                toks.append(",")
            elif i > 0:
                toks.append(DICT_SEPARATOR)
            toks += [p.key, ":", bin_value(p.value, lookup).value]
            groups.append(toks)
    return groups
