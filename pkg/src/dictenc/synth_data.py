"""Synthetic lab-report corpus with a rule-based diagnosis oracle.

Every disease is a conjunction of (kind, key, label) requirements that must
all hold inside one dictionary of that kind. Reports regularly contain two
dictionaries of the same kind, and "split" distractors scatter a rule's
requirements across them, so only within-dictionary reasoning recovers the
gold labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import DiagnosisSample
from .report_model import (
    KeyValuePair,
    LabDictionary,
    LabReportSet,
    LabValue,
    MedicalLabel,
    bin_value,
)

KIND_NAMES = ("blood", "urine", "liver", "renal", "lipid", "thyroid", "culture", "coag")

# key families: (normal label, abnormal labels)
NUMERIC = (MedicalLabel.NORMAL, (MedicalLabel.HI_NORMAL, MedicalLabel.LT_NORMAL))
QUALITATIVE = (
    MedicalLabel.NEGATIVE,
    (MedicalLabel.POSITIVE, MedicalLabel.POSITIVE_PLUS,
     MedicalLabel.POSITIVE_PLUS_PLUS, MedicalLabel.POSITIVE_MINUS),
)
SUSCEPTIBILITY = (MedicalLabel.SENSITIVE, (MedicalLabel.RESISTANT, MedicalLabel.INTERMEDIATE))
FLAGGED = (MedicalLabel.NORMAL, (MedicalLabel.ABNORMAL,))
_FAMILY_CYCLE = (NUMERIC, NUMERIC, QUALITATIVE, NUMERIC, SUSCEPTIBILITY, NUMERIC, QUALITATIVE, FLAGGED)

_TEXT_FOR_LABEL = {
    MedicalLabel.NEGATIVE: "negative",
    MedicalLabel.POSITIVE: "positive",
    MedicalLabel.POSITIVE_PLUS: "+",
    MedicalLabel.POSITIVE_PLUS_PLUS: "++",
    MedicalLabel.POSITIVE_MINUS: "+-",
    MedicalLabel.SENSITIVE: "sensitive",
    MedicalLabel.RESISTANT: "resistant",
    MedicalLabel.INTERMEDIATE: "intermediate",
}


@dataclass
class SynthConfig:
    num_samples: int = 5000
    num_dict_kinds: int = 5
    keys_per_kind: int = 10
    num_diseases: int = 20
    pairs_per_dict: tuple[int, int] = (2, 6)
    dicts_per_report: tuple[int, int] = (2, 6)
    patient_text_noise_tokens: tuple[int, int] = (2, 5)
    triples_per_rule: tuple[int, int] = (2, 3)
    max_planted: int = 2
    split_distractor_prob: float = 0.6
    hint_prob: float = 0.3
    normal_prob: float = 0.7
    num_symptoms: int = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("pairs_per_dict", "dicts_per_report", "patient_text_noise_tokens",
                     "triples_per_rule"):
            lo, hi = getattr(self, name)
            setattr(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if self.pairs_per_dict[0] < 1 or self.dicts_per_report[0] < 1:
            raise ValueError("pairs_per_dict and dicts_per_report must start at >= 1")
        if self.triples_per_rule[0] < 2:
            raise ValueError("rules need at least two required triples")
        if self.triples_per_rule[1] > self.keys_per_kind:
            raise ValueError("triples_per_rule exceeds keys_per_kind")
        if self.num_dict_kinds < 1 or self.num_diseases < 0 or self.num_samples < 0:
            raise ValueError("invalid corpus sizes")
        if self.num_diseases and self.max_planted < 1:
            raise ValueError("max_planted must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiseaseRule:
    diagnosis: str
    kind_tag: str
    required: tuple[tuple[str, MedicalLabel], ...]  # (key, label)

    def __post_init__(self):
        if len(self.required) < 2:
            raise ValueError("a disease rule needs at least two required triples")

    def triples(self):
        return [(self.kind_tag, k, lab) for k, lab in self.required]

    def to_obj(self):
        return {"diagnosis": self.diagnosis, "kind": self.kind_tag,
                "required": [[k, lab.value] for k, lab in self.required]}

    @classmethod
    def from_obj(cls, obj):
        return cls(obj["diagnosis"], obj["kind"],
                   tuple((k, MedicalLabel(lab)) for k, lab in obj["required"]))


@dataclass
class KeySpec:
    name: str
    kind_tag: str
    family: tuple
    lo: float
    hi: float


@dataclass
class World:
    """Keys, reference ranges and disease rules derived from a config."""

    config: SynthConfig
    kinds: list[str]
    keys: dict[str, list[KeySpec]]
    rules: list[DiseaseRule]
    symptoms: list[str] = field(default_factory=list)


def _kind_name(i):
    return KIND_NAMES[i] if i < len(KIND_NAMES) else f"kind{i}"


def build_world(config: SynthConfig) -> World:
    rng = np.random.Generator(np.random.PCG64([config.seed, 0xD1C7]))
    kinds = [_kind_name(i) for i in range(config.num_dict_kinds)]
    keys = {}
    for kind in kinds:
        specs = []
        for j in range(config.keys_per_kind):
            lo = round(float(rng.uniform(1.0, 50.0)), 1)
            hi = round(lo * float(rng.uniform(1.5, 3.0)), 1)
            specs.append(KeySpec(f"{kind}_{j:02d}", kind, _FAMILY_CYCLE[j % len(_FAMILY_CYCLE)], lo, hi))
        keys[kind] = specs
    rules, seen = [], set()
    for d in range(config.num_diseases):
        kind = kinds[d % len(kinds)]
        for _ in range(1000):
            size = int(rng.integers(config.triples_per_rule[0], config.triples_per_rule[1] + 1))
            chosen = rng.choice(config.keys_per_kind, size=size, replace=False)
            req = tuple(sorted(
                (keys[kind][c].name, keys[kind][c].family[1][rng.integers(len(keys[kind][c].family[1]))])
                for c in chosen
            ))
            if req not in seen:
                break
        else:
            raise ValueError("could not draw distinct disease rules; enlarge keys_per_kind")
        seen.add(req)
        rules.append(DiseaseRule(f"dx{d:02d}", kind, req))
    symptoms = [f"sym{i:02d}" for i in range(config.num_symptoms)]
    return World(config, kinds, keys, rules, symptoms)


def oracle_diagnose(report: LabReportSet, rules) -> set[str]:
    """Diagnoses whose required triples all sit in one dictionary of the rule's kind."""
    found = set()
    for d in report.dictionaries:
        present = {(d.kind_tag, p.key, bin_value(p.value)) for p in d.pairs}
        for rule in rules:
            if rule.kind_tag == d.kind_tag and all(t in present for t in rule.triples()):
                found.add(rule.diagnosis)
    return found


def _realize(spec: KeySpec, label: MedicalLabel, rng) -> LabValue:
    if spec.family is NUMERIC:
        if label is MedicalLabel.HI_NORMAL:
            x = spec.hi * rng.uniform(1.05, 1.8)
        elif label is MedicalLabel.LT_NORMAL:
            x = spec.lo * rng.uniform(0.3, 0.95)
        else:
            x = rng.uniform(spec.lo, spec.hi)
        return LabValue.numeric(round(float(x), 2), spec.lo, spec.hi)
    if spec.family is FLAGGED:
        return LabValue.numeric(round(float(rng.uniform(0, 100)), 2), flagged=label is MedicalLabel.ABNORMAL)
    return LabValue.qualitative(_TEXT_FOR_LABEL[label])


def _filler_label(spec, rng, normal_prob):
    normal, abnormal = spec.family
    if rng.random() < normal_prob:
        return normal
    return abnormal[rng.integers(len(abnormal))]


def _sample_rng(seed, index):
    return np.random.Generator(np.random.PCG64([seed, index]))


def _make_sample(world: World, rng, dict_sizes: list[int]) -> DiagnosisSample:
    cfg = world.config
    rules = world.rules
    D = len(dict_sizes)
    kinds = [world.kinds[i] for i in rng.integers(len(world.kinds), size=D)]
    contents: list[dict[str, MedicalLabel]] = [dict() for _ in range(D)]

    planted = []
    if rules:
        n_plant = int(rng.integers(1, cfg.max_planted + 1))
        planted = list(rng.choice(len(rules), size=min(n_plant, len(rules)), replace=False))
    for r in planted:
        rule = rules[r]
        slots = [i for i in range(D) if kinds[i] == rule.kind_tag]
        if not slots:
            # take over a dictionary that nothing has been written to yet
            free = [i for i in range(D) if not contents[i]] or list(range(D))
            i = free[rng.integers(len(free))]
            kinds[i] = rule.kind_tag
            contents[i] = {}
            slots = [i]
        i = slots[rng.integers(len(slots))]
        contents[i].update(dict(rule.required))

    if rules and D >= 2 and rng.random() < cfg.split_distractor_prob:
        rule = rules[int(rng.integers(len(rules)))]
        slots = [i for i in range(D) if kinds[i] == rule.kind_tag]
        free = [i for i in range(D) if not contents[i] and kinds[i] != rule.kind_tag]
        while len(slots) < 2 and free:
            i = free.pop(int(rng.integers(len(free))))
            kinds[i] = rule.kind_tag
            slots.append(i)
        if len(slots) >= 2:
            a, b = rng.choice(slots, size=2, replace=False)
            req = list(rule.required)
            rng.shuffle(req)
            cut = int(rng.integers(1, len(req)))
            contents[a].update(dict(req[:cut]))
            contents[b].update(dict(req[cut:]))

    specs_by_name = {s.name: s for specs in world.keys.values() for s in specs}
    dictionaries = []
    for i in range(D):
        specs = world.keys[kinds[i]]
        target = min(max(dict_sizes[i], len(contents[i])), len(specs))
        unused = [s for s in specs if s.name not in contents[i]]
        order = rng.permutation(len(unused))
        for j in order[: target - len(contents[i])]:
            contents[i][unused[j].name] = _filler_label(unused[j], rng, cfg.normal_prob)
        names = list(contents[i])
        perm = rng.permutation(len(names))
        pairs = tuple(
            KeyValuePair(names[j], _realize(specs_by_name[names[j]], contents[i][names[j]], rng))
            for j in perm
        )
        dictionaries.append(LabDictionary(pairs, kinds[i]))
    report = LabReportSet(tuple(dictionaries))

    gold = sorted(oracle_diagnose(report, rules))
    words = []
    for diag in gold:
        if rng.random() < cfg.hint_prob:
            words.append(world.symptoms[int(diag[2:]) % len(world.symptoms)])
    n_noise = int(rng.integers(cfg.patient_text_noise_tokens[0], cfg.patient_text_noise_tokens[1] + 1))
    words += [world.symptoms[i] for i in rng.integers(len(world.symptoms), size=n_noise)]
    rng.shuffle(words)
    return DiagnosisSample(report, " ".join(words), tuple(gold))


def generate(config: SynthConfig, world: World | None = None) -> list[DiagnosisSample]:
    """``config.num_samples`` samples; sample ``i`` depends only on (seed, i)."""
    world = world or build_world(config)
    out = []
    for idx in range(config.num_samples):
        rng = _sample_rng(config.seed, idx)
        D = int(rng.integers(config.dicts_per_report[0], config.dicts_per_report[1] + 1))
        sizes = [int(x) for x in rng.integers(config.pairs_per_dict[0], config.pairs_per_dict[1] + 1, size=D)]
        out.append(_make_sample(world, rng, sizes))
    return out


def generate_sized(config: SynthConfig, total_pairs: int, count: int, seed: int,
                   world: World | None = None) -> list[DiagnosisSample]:
    """Fresh samples whose reports hold roughly ``total_pairs`` pairs each.

    Dictionaries are filled to the midpoint of ``pairs_per_dict``; planted
    rules may push a report a few pairs above the target.
    """
    world = world or build_world(config)
    per_dict = max(1, min(config.keys_per_kind, sum(config.pairs_per_dict) // 2))
    D = max(1, -(-total_pairs // per_dict))
    base, extra = divmod(total_pairs, D)
    sizes = [base + (1 if i < extra else 0) for i in range(D)]
    return [_make_sample(world, _sample_rng(seed, 1_000_000 + i), sizes) for i in range(count)]


def save_rules(rules, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_obj() for r in rules], f, indent=1)


def load_rules(path) -> list[DiseaseRule]:
    with open(path, encoding="utf-8") as f:
        return [DiseaseRule.from_obj(o) for o in json.load(f)]
