"""Toy decoder LM and the end-to-end diagnosis pipeline.

The LM reads ``[report part] <bos> patient text <ans> diagnosis <eos>``.
In ``dictllm`` mode the report part is the ``n`` virtual tokens produced by
the dict encoder and the OT alignment layer; in ``serialize`` mode it is the
templated text of the report, truncated at pair granularity when it does
not fit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .baseline_serializer import serialize, serialize_pairs
from .corpus import DiagnosisSample
from .dict_tokenizer import EncodedReport, Vocabulary, build_vocab, tokenize
from .hier_encoder import EncoderConfig, HierEncoder, collate
from .ot_align import AlignConfig, make_aligner
from .textproc import TextVocab, split_text

log = logging.getLogger(__name__)

MODES = ("dictllm", "serialize")


class SequenceOverflowError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step, lr, grad_norms):
        worst = sorted(grad_norms.items(), key=lambda kv: -kv[1])[:5]
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3g}); largest grad norms: {worst}")
        self.step = step
        self.lr = lr
        self.grad_norms = grad_norms


@dataclass
class LMConfig:
    text_vocab_size: int
    layers: int = 2
    embed_dim: int = 256
    heads: int = 4
    max_seq_len: int = 256
    max_new_tokens: int = 16
    generation: str = "greedy"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.generation != "greedy":
            raise ValueError("only greedy generation is supported")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5  # suits a pretrained LM; from-scratch toy runs need ~1e-3
    warmup_ratio: float = 0.01
    epochs: int = 6
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    optimizer: str = "AdamW"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.optimizer != "AdamW":
            raise ValueError("only AdamW is supported")

    def to_dict(self):
        return asdict(self)


class CausalBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        B, T, C = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(C, dim=-1)
        q, k, v = (t.view(B, T, self.heads, C // self.heads).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.proj(y.transpose(1, 2).reshape(B, T, C))
        return x + self.mlp(self.ln2(x))


class ToyLM(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.text_vocab_size, config.embed_dim)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.embed_dim)
        self.blocks = nn.ModuleList(CausalBlock(config.embed_dim, config.heads) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.text_vocab_size)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        # uniform predictor at init: step-0 loss is ln(vocab)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        T = embeds.shape[1]
        if T > self.config.max_seq_len:
            raise SequenceOverflowError(
                f"sequence of {T} tokens exceeds max_seq_len={self.config.max_seq_len}"
            )
        x = embeds + self.pos_emb.weight[:T]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


def lm_forward(virtual_tokens, text_tokens, target_prefix, lm: ToyLM, bos_id: int = 1) -> torch.Tensor:
    """Next-token logits over the answer span.

    ``target_prefix`` is the answer-side input starting with ``<ans>``; row
    ``t`` of the result predicts the token after ``target_prefix[t]``, so the
    shape is ``(len(target_prefix), vocab)``. ``virtual_tokens`` may have
    zero rows, which reduces this to a plain text LM.
    """
    text = torch.as_tensor([bos_id, *text_tokens], dtype=torch.long)
    prefix = torch.as_tensor(list(target_prefix), dtype=torch.long)
    n = virtual_tokens.shape[0]
    total = n + len(text) + len(prefix)
    if total > lm.config.max_seq_len:
        raise SequenceOverflowError(
            f"{total} tokens (n={n}, text={len(text)}, prefix={len(prefix)}) exceed "
            f"max_seq_len={lm.config.max_seq_len}"
        )
    emb = torch.cat([virtual_tokens.to(lm.tok_emb.weight.dtype), lm.tok_emb(text), lm.tok_emb(prefix)])
    logits = lm(emb[None])[0]
    return logits[n + len(text):]


@dataclass
class PreparedSample:
    """Per-sample inputs cached across epochs."""

    encoded: EncodedReport | None
    report_ids: list[int]  # serialize mode only
    truncated_pairs: int
    text_ids: list[int]
    target_ids: list[int]


class DiagnosisPipeline(nn.Module):
    """Dict encoder + alignment + toy LM, or the serialization baseline."""

    def __init__(self, mode, text_vocab: TextVocab, lm_config: LMConfig,
                 vocab: Vocabulary | None = None, encoder_config: EncoderConfig | None = None,
                 align_config: AlignConfig | None = None):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.text_vocab = text_vocab
        self.lm_config = lm_config
        self.vocab = vocab
        self.encoder_config = encoder_config
        self.align_config = align_config
        self.lm = ToyLM(lm_config)
        if mode == "dictllm":
            if vocab is None or encoder_config is None or align_config is None:
                raise ValueError("dictllm mode needs a vocabulary, encoder and align configs")
            if align_config.target_dim != lm_config.embed_dim:
                raise ValueError("align target_dim must equal the LM embed_dim")
            self.encoder = HierEncoder(encoder_config)
            self.aligner = make_aligner(encoder_config.hidden_dim, align_config)

    @property
    def num_virtual_tokens(self) -> int:
        return self.align_config.num_virtual_tokens if self.mode == "dictllm" else 0

    # input preparation -------------------------------------------------

    def report_budget(self, text_len: int) -> int:
        """Tokens left for a serialized report next to a text of ``text_len``."""
        return self.lm_config.max_seq_len - (text_len + 2) - (self.lm_config.max_new_tokens + 1)

    def serialized_report_ids(self, report, text_len: int) -> tuple[list[int], int, int]:
        """(ids, truncated pair count, untruncated token count)."""
        groups = serialize_pairs(report)
        stoi, unk = self.text_vocab.stoi, self.text_vocab.unk_id
        budget = self.report_budget(text_len)
        ids, kept = [], 0
        for g in groups:
            if len(ids) + len(g) > budget:
                break
            ids += [stoi.get(t, unk) for t in g]
            kept += 1
        return ids, len(groups) - kept, sum(len(g) for g in groups)

    def prepare(self, sample: DiagnosisSample) -> PreparedSample:
        text_ids = self.text_vocab.encode(sample.patient_text)
        target_ids = self.text_vocab.encode(sample.target)
        if self.mode == "dictllm":
            enc = tokenize(sample.report, self.vocab)
            if not self.encoder_config.group_pe and len(enc) > self.encoder_config.max_group_pos:
                raise SequenceOverflowError(
                    f"report of {len(enc)} tokens exceeds max_group_pos={self.encoder_config.max_group_pos}"
                )
            return PreparedSample(enc, [], 0, text_ids, target_ids)
        ids, dropped, _ = self.serialized_report_ids(sample.report, len(text_ids))
        return PreparedSample(None, ids, dropped, text_ids, target_ids)

    def report_token_count(self, report, text_len: int = 0) -> int:
        """LM positions taken by a report before any truncation."""
        if self.mode == "dictllm":
            return self.num_virtual_tokens
        return self.serialized_report_ids(report, text_len)[2]

    # forward -------------------------------------------------------------

    def virtual_tokens(self, encoded: Sequence[EncodedReport]) -> torch.Tensor:
        batch = collate(encoded, self.encoder_config)
        h = self.encoder(batch.token_ids, batch.pos_ids, batch.mask, batch.pair)
        return self.aligner(h, batch.valid)

    def batch_loss(self, prepared: Sequence[PreparedSample]) -> torch.Tensor:
        """Mean cross-entropy over answer tokens (teacher forcing)."""
        tv = self.text_vocab
        rows, targets = [], []
        for p in prepared:
            seq = p.report_ids + [tv.bos_id] + p.text_ids + [tv.ans_id] + p.target_ids + [tv.eos_id]
            tgt = [-100] * len(seq)
            start = len(seq) - len(p.target_ids) - 2  # position of <ans>
            for t in range(start, len(seq) - 1):
                tgt[t] = seq[t + 1]
            rows.append(seq)
            targets.append(tgt)
        T = max(len(r) for r in rows)
        ids = torch.full((len(rows), T), tv.pad_id, dtype=torch.long)
        tgt = torch.full((len(rows), T), -100, dtype=torch.long)
        for i, (r, t) in enumerate(zip(rows, targets)):
            ids[i, : len(r)] = torch.tensor(r)
            tgt[i, : len(t)] = torch.tensor(t)
        emb = self.lm.tok_emb(ids)
        if self.mode == "dictllm":
            vt = self.virtual_tokens([p.encoded for p in prepared]).to(emb.dtype)
            emb = torch.cat([vt, emb], dim=1)
            tgt = torch.cat([torch.full((len(rows), vt.shape[1]), -100, dtype=torch.long), tgt], dim=1)
        logits = self.lm(emb)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)

    @torch.no_grad()
    def generate_ids(self, prepared: PreparedSample) -> list[int]:
        tv = self.text_vocab
        if self.mode == "dictllm":
            prefix = self.virtual_tokens([prepared.encoded])[0]
        else:
            prefix = self.lm.tok_emb(torch.tensor(prepared.report_ids, dtype=torch.long))
        head = torch.tensor([tv.bos_id, *prepared.text_ids, tv.ans_id], dtype=torch.long)
        emb = torch.cat([prefix.to(self.lm.tok_emb.weight.dtype), self.lm.tok_emb(head)])
        out = []
        for _ in range(self.lm_config.max_new_tokens):
            if emb.shape[0] > self.lm_config.max_seq_len:
                raise SequenceOverflowError(
                    f"generation exceeded max_seq_len={self.lm_config.max_seq_len}"
                )
            nxt = int(self.lm(emb[None])[0, -1].argmax())
            if nxt == tv.eos_id:
                break
            out.append(nxt)
            emb = torch.cat([emb, self.lm.tok_emb(torch.tensor([nxt]))])
        return out

    def generate(self, sample: DiagnosisSample) -> str:
        was_training = self.training
        self.eval()
        try:
            return self.text_vocab.decode(self.generate_ids(self.prepare(sample)))
        finally:
            self.train(was_training)


def build_pipeline(
    samples: Sequence[DiagnosisSample],
    mode: str = "dictllm",
    *,
    encoder: dict | None = None,
    align: dict | None = None,
    lm: dict | None = None,
    ablations: dict | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> DiagnosisPipeline:
    """Fresh pipeline with vocabularies built from ``samples``.

    ``encoder``/``align``/``lm`` override config defaults. ``ablations`` takes
    the keys ``no_group_pe``, ``no_attn_bias`` and ``linear_align``.
    """
    ablations = dict(ablations or {})
    unknown = set(ablations) - {"no_group_pe", "no_attn_bias", "linear_align"}
    if unknown:
        raise ValueError(f"unknown ablation flags {sorted(unknown)}")
    if mode == "serialize" and any(ablations.values()):
        raise ValueError("ablation flags only apply to dictllm mode")
    texts = [s.patient_text for s in samples] + [s.target for s in samples]
    if mode == "serialize":
        texts += [serialize(s.report) for s in samples]
    text_vocab = TextVocab.from_texts(texts)
    lm_kw = dict(lm or {})
    torch.manual_seed(seed)
    if mode == "serialize":
        lm_config = LMConfig(text_vocab_size=len(text_vocab), **lm_kw)
        return DiagnosisPipeline(mode, text_vocab, lm_config).to(dtype)
    vocab = build_vocab(s.report for s in samples)
    enc_kw = dict(encoder or {})
    if ablations.get("no_group_pe"):
        enc_kw["group_pe"] = False
        enc_kw.setdefault("max_group_pos", 1024)
    if ablations.get("no_attn_bias"):
        enc_kw["attn_bias"] = False
    al_kw = dict(align or {})
    if ablations.get("linear_align"):
        al_kw["linear_align"] = True
    lm_config = LMConfig(text_vocab_size=len(text_vocab), **lm_kw)
    al_kw.setdefault("target_dim", lm_config.embed_dim)
    enc_config = EncoderConfig(vocab_size=len(vocab), **enc_kw)
    align_config = AlignConfig(**al_kw)
    return DiagnosisPipeline(mode, text_vocab, lm_config, vocab, enc_config, align_config).to(dtype)


def _grad_norms(model):
    return {name: float(p.grad.norm()) for name, p in model.named_parameters() if p.grad is not None}


def train(
    pipeline: DiagnosisPipeline,
    samples: Sequence[DiagnosisSample],
    config: TrainConfig,
    metrics_log=None,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Jointly train all pipeline parameters; returns the per-step loss curve.

    AdamW with linear warmup over ``warmup_ratio`` of all steps, then a
    constant rate. ``metrics_log`` (an open text file) receives one JSON line
    ``{step, loss, lr}`` per step.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    prepared = [pipeline.prepare(s) for s in samples]
    rng = np.random.Generator(np.random.PCG64(config.seed))
    torch.manual_seed(config.seed)
    steps_per_epoch = math.ceil(len(prepared) / config.batch_size)
    total = steps_per_epoch * config.epochs
    warmup = max(1, int(round(config.warmup_ratio * total))) if config.warmup_ratio > 0 else 0
    opt = torch.optim.AdamW(pipeline.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    pipeline.train()
    curve = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(prepared))
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            lr = config.learning_rate * (min(1.0, (step + 1) / warmup) if warmup else 1.0)
            for group in opt.param_groups:
                group["lr"] = lr
            try:
                loss = pipeline.batch_loss([prepared[i] for i in idx])
            except FloatingPointError:
                raise TrainingDiverged(step, lr, _grad_norms(pipeline)) from None
            opt.zero_grad()
            loss.backward()
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, lr, _grad_norms(pipeline))
            if config.grad_clip:
                nn.utils.clip_grad_norm_(pipeline.parameters(), config.grad_clip)
            opt.step()
            value = loss.item()
            curve.append(value)
            if metrics_log is not None:
                metrics_log.write(json.dumps({"step": step, "loss": value, "lr": lr}) + "\n")
            if on_step is not None:
                on_step(step, value)
            step += 1
    pipeline.eval()
    return curve


def generate(pipeline: DiagnosisPipeline, report, patient_text: str) -> str:
    """Greedy diagnosis text for one report and patient description."""
    return pipeline.generate(DiagnosisSample(report, patient_text))
