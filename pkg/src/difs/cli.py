"""Command-line interface.

Subcommands: synth, pretrain-lm, train, eval, inspect. The config file is
the single source of truth; --set section.key=value overrides individual
keys, --seed (or DIFS_SEED) overrides the seed, and every command persists
the resolved configuration next to its outputs.

Exit codes: 0 success, 2 usage, 3 validation, 4 missing dependency,
5 transport failure.
"""

import argparse
import json
import sys
from pathlib import Path

from . import data, lm as lm_mod, pipeline
from .assembly import SlotFill, build_input
from .config import resolve_config
from .errors import (
    DependencyError,
    DifsError,
    DomainError,
    TransportError,
    UsageError,
    ValidationError,
)
from .judge import make_judge
from .rng import derive_seed, np_rng

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_DEPENDENCY = 4
EXIT_TRANSPORT = 5


def _add_common(parser):
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="difs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")

    p = sub.add_parser("pretrain-lm", help="pretrain the language model on text tasks")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="directory for lm.npz and the log")

    p = sub.add_parser("train", help="run one training stage")
    _add_common(p)
    p.add_argument("--stage", required=True, choices=list(pipeline.STAGE_SEQUENCE))
    p.add_argument("--corpus", required=True)
    p.add_argument("--lm", required=True, help="pretrained language model file")
    p.add_argument("--ckpt-root", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint under an ablation mode")
    _add_common(p)
    p.add_argument("--mode", required=True, choices=["P", "L", "PL"])
    p.add_argument(
        "--suite", required=True, choices=["attributes", "asr", "conversation"]
    )
    p.add_argument("--corpus", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--ckpt", required=True, help="directory with adapter checkpoints")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--judge", default=None, help="'mock' or a judge endpoint URL")
    p.add_argument("--limit", type=int, default=None, help="cap the number of records")

    p = sub.add_parser("inspect", help="print the assembly of one utterance")
    _add_common(p)
    p.add_argument("--id", required=True, dest="utterance_id")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument(
        "--fills",
        default="para=speech,content=speech",
        help="e.g. para=none,content=text",
    )
    return parser


def cmd_synth(args, cfg):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(
            f"output directory {out} is not empty; pass --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    section = cfg.section("corpus")
    corpus_cfg = data.CorpusConfig(seed=derive_seed(cfg.seed, "corpus"), **section)
    summary = data.generate_corpus(corpus_cfg, out)
    cfg.write(out / "resolved.cfg")
    print(f"corpus written to {out}")
    for split, counts in summary["splits"].items():
        print(
            f"  {split}: {counts['utterances']} utterances "
            f"({counts['conversations']} conversations)"
        )
    for attribute, counts in summary["attribute_counts"].items():
        rendered = ", ".join(f"{label}={n}" for label, n in sorted(counts.items()))
        print(f"  {attribute}: {rendered}")
    return EXIT_OK


def cmd_pretrain_lm(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_corpus = data.load_corpus(args.corpus, "train")
    val_corpus = data.load_corpus(args.corpus, "val")
    lm, log = pipeline.pretrain_language_model(cfg, train_corpus, val_corpus)
    lm.freeze()
    lm_mod.save_language_model(lm, out / "lm.npz")
    with open(out / "pretrain_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    cfg.write(out / "resolved.cfg")
    final = log[-1] if log else {}
    print(f"language model written to {out / 'lm.npz'}")
    print(
        "final gates: "
        + ", ".join(f"{k}={v}" for k, v in final.items() if k != "gate_passed")
    )
    if not final.get("gate_passed", False):
        print("warning: pretraining gates not met; adapter training may underperform")
    return EXIT_OK


def cmd_train(args, cfg):
    ckpt_root = Path(args.ckpt_root)
    ckpt_root.mkdir(parents=True, exist_ok=True)
    result = pipeline.run_training_stage(
        cfg, args.stage, args.corpus, args.lm, ckpt_root
    )
    cfg.write(ckpt_root / f"resolved_stage{args.stage}.cfg")
    print(
        f"stage {args.stage} done: best validation loss {result.best_val_loss:.6f}; "
        f"checkpoints under {ckpt_root / ('stage' + args.stage)}"
    )
    return EXIT_OK


def cmd_eval(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    judge_spec = args.judge or cfg.get("eval", "judge")
    judge = make_judge(judge_spec) if args.suite == "conversation" else None
    report = pipeline.run_evaluation(
        cfg,
        args.mode,
        args.suite,
        args.corpus,
        args.lm,
        args.ckpt,
        judge=judge,
        limit=args.limit,
    )
    report_path = out / f"report-{args.suite}-{args.mode}.jsonl"
    report.write(report_path)
    cfg.write(out / f"resolved-{args.suite}-{args.mode}.cfg")
    print(f"report written to {report_path}")
    print(json.dumps(report.summary, sort_keys=True))
    return EXIT_OK


_FILL_CHOICES = {
    "para": {
        "speech": SlotFill.FROM_SPEECH,
        "text": SlotFill.FROM_CAPTION_TEXT,
        "none": SlotFill.ABSENT,
    },
    "content": {
        "speech": SlotFill.FROM_SPEECH,
        "text": SlotFill.FROM_TRANSCRIPT_TEXT,
        "none": SlotFill.ABSENT,
    },
}


def _parse_fills(spec: str):
    fills = {"para": SlotFill.FROM_SPEECH, "content": SlotFill.FROM_SPEECH}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "=" not in part:
            raise UsageError(f"bad fill spec {part!r}; expected slot=source")
        slot, source = part.split("=", 1)
        if slot not in _FILL_CHOICES or source not in _FILL_CHOICES[slot]:
            raise UsageError(f"bad fill spec {part!r}")
        fills[slot] = _FILL_CHOICES[slot][source]
    return fills["para"], fills["content"]


def cmd_inspect(args, cfg):
    fills = _parse_fills(args.fills)
    lm = lm_mod.load_language_model(args.lm)
    if not lm.frozen:
        lm.freeze()
    bundle = pipeline.load_bundle(args.ckpt, lm)
    corpus = data.load_corpus(args.corpus, "test")
    record = corpus.records.get(args.utterance_id)
    if record is None:
        for split in ("train", "val"):
            record = data.load_corpus(args.corpus, split).records.get(args.utterance_id)
            if record is not None:
                break
    if record is None:
        raise ValidationError(f"unknown utterance id {args.utterance_id!r}")
    rng = np_rng(cfg.seed, "inspect", args.utterance_id)
    instruction = corpus.pool.sample("asr", rng)
    assembled = build_input(
        [], instruction, record, fills, adapters=bundle.adapters, lm=lm
    )
    print(f"utterance {record.utterance_id}: n_s={record.features.n_s}")
    print(f"fills: para={fills[0].value}, content={fills[1].value}")
    print("segment map:")
    for seg in assembled.segment_map:
        print(f"  {seg.kind:<13} start={seg.start:<5} length={seg.length}")
    response = lm.generate(assembled, max_new_tokens=cfg.get("eval", "max_new_tokens"))
    print(f"greedy response: {response!r}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (DifsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
