import math

import pytest
import torch

from dictenc.baseline_serializer import serialize_pairs
from dictenc.corpus import DiagnosisSample
from dictenc.report_model import MedicalLabel
from dictenc.report_model import perturb
from dictenc.synth_data import SynthConfig, generate
from dictenc.toy_lm import (
    LMConfig,
    SequenceOverflowError,
    ToyLM,
    TrainConfig,
    TrainingDiverged,
    build_pipeline,
    lm_forward,
    train,
)

SMALL_ENC = dict(num_layers=1, hidden_dim=16, num_heads=2)
SMALL_LM = dict(layers=1, embed_dim=16, heads=2, max_seq_len=128, max_new_tokens=8)
SAMPLES = generate(SynthConfig(num_samples=40, seed=3))


def small(mode="dictllm", dtype=torch.float32, **kw):
    extra = dict(align=dict(num_virtual_tokens=4)) if mode == "dictllm" else {}
    return build_pipeline(SAMPLES, mode, encoder=SMALL_ENC, lm=SMALL_LM, dtype=dtype, **extra, **kw)


def randomize_head(lm):
    with torch.no_grad():
        torch.nn.init.normal_(lm.head.weight, std=1.0)


def test_lm_forward_shapes():
    lm = ToyLM(LMConfig(text_vocab_size=11, layers=1, embed_dim=8, heads=2, max_seq_len=32))
    out = lm_forward(torch.randn(5, 8), [5, 6, 7], [2, 8], lm)
    assert out.shape == (2, 11)
    assert lm_forward(torch.zeros(0, 8), [5], [2, 8, 9], lm).shape == (3, 11)


def test_lm_causality():
    lm = ToyLM(LMConfig(text_vocab_size=11, layers=2, embed_dim=8, heads=2, max_seq_len=32))
    randomize_head(lm)
    vt = torch.randn(3, 8)
    a = lm_forward(vt, [5, 6], [2, 7, 8, 9], lm)
    b = lm_forward(vt, [5, 6], [2, 7, 10, 10], lm)
    assert torch.equal(a[:2], b[:2])
    assert not torch.allclose(a[2:], b[2:])


def test_overflow_raises():
    lm = ToyLM(LMConfig(text_vocab_size=11, layers=1, embed_dim=8, heads=2, max_seq_len=8))
    with pytest.raises(SequenceOverflowError, match="max_seq_len=8"):
        lm_forward(torch.randn(4, 8), [5, 6, 7], [2, 8], lm)


@pytest.mark.parametrize("mode", ["dictllm", "serialize"])
def test_initial_loss_is_log_vocab(mode):
    p = small(mode)
    loss = p.batch_loss([p.prepare(s) for s in SAMPLES[:8]])
    assert loss.item() == pytest.approx(math.log(len(p.text_vocab)), abs=1e-5)


def test_memorises_one_sample():
    p = small()
    sample = SAMPLES[0]
    train(p, [sample] * 8, TrainConfig(learning_rate=3e-3, epochs=40, batch_size=8, warmup_ratio=0.0))
    assert p.generate(sample) == sample.target


def test_training_is_deterministic_in_float64():
    curves = []
    for _ in range(2):
        p = small(dtype=torch.float64)
        curves.append(train(p, SAMPLES[:16], TrainConfig(learning_rate=1e-3, epochs=2, batch_size=8)))
    assert curves[0] == curves[1]


def test_metrics_log(tmp_path):
    import json

    p = small("serialize")
    with open(tmp_path / "m.jsonl", "w") as f:
        curve = train(p, SAMPLES[:16], TrainConfig(learning_rate=1e-3, epochs=1, batch_size=8), metrics_log=f)
    rows = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1]
    assert [r["loss"] for r in rows] == curve


def test_nan_raises_diverged():
    p = small()
    with torch.no_grad():
        p.lm.tok_emb.weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as err:
        train(p, SAMPLES[:8], TrainConfig(learning_rate=1e-3, epochs=1, batch_size=8))
    assert err.value.step == 0 and err.value.grad_norms


def test_nan_in_encoder_raises_diverged():
    p = small()
    with torch.no_grad():
        p.encoder.tok_emb.weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train(p, SAMPLES[:8], TrainConfig(learning_rate=1e-3, epochs=1, batch_size=8))


def test_dictllm_generation_invariant_under_perturbation():
    p = small(dtype=torch.float64)
    randomize_head(p.lm)
    p.aligner.early_stop = False  # fixed iteration count, no data-dependent stopping
    for i, s in enumerate(SAMPLES[:10]):
        shuffled = DiagnosisSample(perturb(s.report, i), s.patient_text, s.diagnoses)
        vt = p.virtual_tokens([p.prepare(s).encoded])
        vt2 = p.virtual_tokens([p.prepare(shuffled).encoded])
        assert torch.allclose(vt, vt2, atol=1e-9)
        assert p.generate(s) == p.generate(shuffled)


def test_serialize_truncation_is_pair_granular():
    p = build_pipeline(SAMPLES, "serialize", lm=dict(SMALL_LM, max_seq_len=40, max_new_tokens=8))
    s = max(SAMPLES, key=lambda x: x.report.num_pairs)
    prep = p.prepare(s)
    assert prep.truncated_pairs > 0
    budget = p.report_budget(len(prep.text_ids))
    assert len(prep.report_ids) <= budget
    # the kept ids are a whole-pair prefix of the full serialization
    full = [p.text_vocab.stoi[t] for g in serialize_pairs(s.report) for t in g]
    assert full[: len(prep.report_ids)] == prep.report_ids
    assert p.text_vocab.itos[prep.report_ids[-1]] in {lab.value for lab in MedicalLabel}
    p.generate(s)  # fits in max_seq_len


def test_ablation_flags_rejected_for_serialize():
    with pytest.raises(ValueError):
        build_pipeline(SAMPLES, "serialize", ablations={"no_attn_bias": True})
    with pytest.raises(ValueError):
        build_pipeline(SAMPLES, "dictllm", ablations={"bogus": True})


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(small(), [], TrainConfig())
