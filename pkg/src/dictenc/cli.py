"""``dictenc`` command line: gen-data, train, eval, scale-eval.

Every command prints a JSON document on stdout (and to ``--out`` when
given) and exits 0 on success, 1 on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("dictenc")


def _threads():
    import torch

    n = os.environ.get("DICTENC_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1, sort_keys=False)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gen_data(args):
    from .corpus import write_corpus
    from .synth_data import SynthConfig, build_world, generate, save_rules

    cfg = SynthConfig.from_dict(_read_json(args.config))
    world = build_world(cfg)
    samples = generate(cfg, world)
    out = Path(args.out)
    rules_path = Path(args.rules) if args.rules else out.with_name(out.stem + ".rules.json")
    write_corpus(samples, out)
    save_rules(world.rules, rules_path)
    _emit({"corpus": str(out), "rules": str(rules_path), "num_samples": len(samples),
           "mean_pairs": float(np.mean([s.report.num_pairs for s in samples])) if samples else 0.0})


def cmd_train(args):
    from .checkpoint import save_pipeline
    from .corpus import read_corpus, split_corpus
    from .toy_lm import TrainConfig, build_pipeline, train

    ablations = {"no_group_pe": args.no_group_pe, "no_attn_bias": args.no_attn_bias,
                 "linear_align": args.linear_align}
    if args.mode == "serialize" and (any(ablations.values()) or args.virtual_tokens is not None):
        raise ValueError("--no-group-pe/--no-attn-bias/--linear-align/--virtual-tokens need --mode dictllm")
    cfg = _read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"train", "encoder", "align", "lm"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    train_cfg = TrainConfig(**cfg.get("train", {}))
    align = dict(cfg.get("align", {}))
    if args.virtual_tokens is not None:
        align["num_virtual_tokens"] = args.virtual_tokens
    samples = split_corpus(read_corpus(args.corpus), args.split)
    pipeline = build_pipeline(samples, args.mode, encoder=cfg.get("encoder"), align=align,
                              lm=cfg.get("lm"), ablations=ablations, seed=train_cfg.seed)
    out = Path(args.out)
    metrics_path = Path(args.metrics_log) if args.metrics_log else out.with_name(out.name + ".metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as mlog:
        curve = train(pipeline, samples, train_cfg, metrics_log=mlog)
    save_pipeline(pipeline, out)
    if args.figure:
        from .plotting import loss_curve

        loss_curve(curve, args.figure, title=f"{args.mode} training loss")
    _emit({"checkpoint": str(out), "mode": args.mode, "steps": len(curve),
           "num_samples": len(samples), "first_loss": curve[0], "final_loss": curve[-1],
           "report_tokens": pipeline.num_virtual_tokens if args.mode == "dictllm" else None,
           "metrics_log": str(metrics_path)})


def cmd_eval(args):
    from .checkpoint import load_pipeline
    from .corpus import DiagnosisSample, read_corpus, split_corpus
    from .eval_metrics import evaluate_batch
    from .report_model import perturb

    pipeline = load_pipeline(args.checkpoint)
    samples = split_corpus(read_corpus(args.corpus), args.split)
    if args.limit is not None:
        samples = samples[: args.limit]
    before = [pipeline.generate(s) for s in samples]
    refs = [s.target for s in samples]
    after = None
    if args.perturb_seed is not None:
        shuffled = [DiagnosisSample(perturb(s.report, args.perturb_seed + i), s.patient_text, s.diagnoses)
                    for i, s in enumerate(samples)]
        after = [pipeline.generate(s) for s in shuffled]
    report = evaluate_batch(before, refs, after)
    report = {"mode": pipeline.mode, "split": args.split, "perturb_seed": args.perturb_seed, **report}
    if args.figure and after is not None:
        from .plotting import rc_histogram

        rc_histogram([s["rc"] for s in report["samples"]], args.figure)
    _emit(report, args.out)


def cmd_scale_eval(args):
    from .checkpoint import load_pipeline
    from .eval_metrics import extract_diagnoses, knowledge_f1
    from .synth_data import SynthConfig, build_world, generate_sized
    from .textproc import split_text

    pipeline = load_pipeline(args.checkpoint)
    synth = SynthConfig.from_dict(_read_json(args.synth_config)) if args.synth_config else SynthConfig()
    world = build_world(synth)
    rows = []
    for total in [int(x) for x in args.pairs_list.split(",") if x.strip()]:
        samples = generate_sized(synth, total, args.samples, args.seed, world)
        f1s, tokens, fed, dropped = [], [], [], []
        for s in samples:
            text_len = len(split_text(s.patient_text))
            tokens.append(pipeline.report_token_count(s.report, text_len))
            prep = pipeline.prepare(s)
            fed.append(pipeline.num_virtual_tokens if pipeline.mode == "dictllm" else len(prep.report_ids))
            dropped.append(prep.truncated_pairs)
            gen = pipeline.text_vocab.decode(pipeline.generate_ids(prep))
            f1s.append(knowledge_f1(extract_diagnoses(gen), s.diagnoses).f1)
        rows.append({
            "total_pairs": total,
            "mean_pairs": float(np.mean([s.report.num_pairs for s in samples])),
            "report_tokens": float(np.mean(tokens)),
            "report_tokens_fed": float(np.mean(fed)),
            "truncated_pairs": float(np.mean(dropped)),
            "knowledge_f1": float(np.mean(f1s)),
        })
    if args.figure:
        from .plotting import scale_figure

        scale_figure(rows, args.figure, pipeline.mode)
    _emit({"mode": pipeline.mode, "rows": rows}, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dictenc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus and its rules")
    p.add_argument("--config", required=True, help="SynthConfig JSON")
    p.add_argument("--out", required=True, help="corpus JSON-lines path")
    p.add_argument("--rules", help="rules JSON path (default: <out stem>.rules.json)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a dictllm or serialization pipeline")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="JSON with optional train/encoder/align/lm sections")
    p.add_argument("--out", required=True, help="checkpoint path (sidecar written to <out>.json)")
    p.add_argument("--mode", choices=["dictllm", "serialize"], default="dictllm")
    p.add_argument("--no-group-pe", action="store_true", help="sequential instead of pair-local positions")
    p.add_argument("--no-attn-bias", action="store_true", help="drop the hierarchical attention mask")
    p.add_argument("--linear-align", action="store_true", help="mean-pool + affine instead of OT")
    p.add_argument("--virtual-tokens", type=int, help="number of virtual tokens (default 64)")
    p.add_argument("--split", choices=["train", "all"], default="train")
    p.add_argument("--metrics-log", help="JSON-lines {step, loss, lr} (default: <out>.metrics.jsonl)")
    p.add_argument("--figure", help="write the loss curve to this image file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="generate and score diagnoses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "eval", "all"], default="eval")
    p.add_argument("--perturb-seed", type=int, help="also evaluate perturbed reports and report RC")
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    p.add_argument("--figure", help="RC histogram image (with --perturb-seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scale-eval", help="footprint and F1 against report size")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs-list", default="8,32,128,256")
    p.add_argument("--synth-config", help="SynthConfig JSON used to build the rules")
    p.add_argument("--samples", type=int, default=20, help="fresh reports per size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--figure", help="write a two-panel figure to this image file")
    p.set_defaults(func=cmd_scale_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads()
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, TypeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
