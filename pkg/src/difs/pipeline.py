"""Phase orchestration shared by the command-line interface and tests."""

import json
from pathlib import Path

from . import adapters as adapters_mod
from . import data, evaluation, lm as lm_mod, training
from .adapters import LinguisticAdapterConfig, ParalinguisticAdapterConfig
from .assembly import AssembledInput, TaskKind
from .config import RunConfig
from .errors import DependencyError, DomainError
from .evaluation import AblationMode, parse_choice_response
from .rng import derive_seed, np_rng
from .training import ModelBundle, StageConfig

STAGE_SEQUENCE = ("1", "2a", "2b", "3")
_STAGE_SECTION = {"1": "stage1", "2a": "stage2a", "2b": "stage2b", "3": "stage3"}


def new_language_model(cfg: RunConfig):
    tokenizer = lm_mod.build_tokenizer()
    section = cfg.section("lm")
    return lm_mod.new_language_model(
        tokenizer,
        d_l=section["d_l"],
        n_layers=section["n_layers"],
        n_heads=section["n_heads"],
        max_context=section["max_context"],
        seed=derive_seed(cfg.seed, "lm"),
    )


def new_adapters(cfg: RunConfig):
    a = cfg.section("adapters")
    d_s = cfg.get("corpus", "d_s")
    d_l = cfg.get("lm", "d_l")
    para = adapters_mod.ParalinguisticAdapter(
        ParalinguisticAdapterConfig(
            n_layers=a["para_layers"],
            n_heads=a["para_heads"],
            dropout=a["para_dropout"],
            n_a=a["n_a"],
            d_s=d_s,
            d_l=d_l,
        ),
        seed=derive_seed(cfg.seed, "para-adapter"),
    )
    ling = adapters_mod.LinguisticAdapter(
        LinguisticAdapterConfig(k=a["k"], d_h=a["d_h"], d_s=d_s, d_l=d_l),
        seed=derive_seed(cfg.seed, "ling-adapter"),
    )
    return para, ling


def stage_config(cfg: RunConfig, stage: str) -> StageConfig:
    section = dict(cfg.section(_STAGE_SECTION[stage]))
    mixture = None
    if stage == "3":
        mixture = {
            TaskKind.DUAL_INFORMATION: section.pop("mixture_dual"),
            TaskKind.LINGUISTIC: section.pop("mixture_linguistic"),
            TaskKind.PARALINGUISTIC: section.pop("mixture_paralinguistic"),
        }
    return StageConfig(
        stage=stage,
        task_mixture=mixture,
        seed=derive_seed(cfg.seed, "stage", stage),
        max_new_tokens=cfg.get("eval", "max_new_tokens"),
        **section,
    )


# ---------------------------------------------------------------------------
# Language-model pretraining
# ---------------------------------------------------------------------------


def text_prompt_input(sample: data.TextTaskSample, lm) -> AssembledInput:
    """Prompt-only assembled input for a text task, ready for generation."""
    first_target = sample.loss_mask.index(True)
    ids = sample.token_ids[:first_target]
    return AssembledInput(
        embeddings=lm.embed_ids(ids),
        token_ids=list(ids),
        loss_mask=[False] * len(ids),
    )


def score_text_samples(lm, samples, max_new_tokens=24):
    """Greedy-decode each text sample and score it against its target."""
    correct = 0
    for sample in samples:
        response = lm.generate(text_prompt_input(sample, lm), max_new_tokens)
        if sample.kind is TaskKind.PARALINGUISTIC:
            predicted = parse_choice_response(response, sample.meta["choices"])
            correct += predicted == sample.meta["label"]
        else:
            correct += response == sample.meta["target"]
    return correct / len(samples) if samples else 0.0


def build_text_eval_sets(val_corpus: data.Corpus, lm, seed: int, n_each: int):
    """Held-out text tasks per family, with caption-only attribute QA."""
    from .assembly import SlotFill, truncate_context

    rng = np_rng(seed, "text-eval", val_corpus.split)
    records = val_corpus.record_list
    sets = {"qa": [], "asr": [], "dialog": []}
    for i in range(n_each):
        record = records[int(rng.integers(len(records)))]
        attribute = data.ATTRIBUTE_NAMES[i % len(data.ATTRIBUTE_NAMES)]
        task = data.build_attribute_sample(record, attribute, val_corpus.pool, rng)
        text = data.text_sample_from_task(
            task, lm, (SlotFill.FROM_CAPTION_TEXT, SlotFill.ABSENT)
        )
        text.meta["label"] = record.attributes.label(attribute)
        sets["qa"].append(text)
    for _ in range(n_each):
        record = records[int(rng.integers(len(records)))]
        task = data.build_asr_sample(record, val_corpus.pool, rng)
        sets["asr"].append(
            data.text_sample_from_task(
                task, lm, (SlotFill.ABSENT, SlotFill.FROM_TRANSCRIPT_TEXT)
            )
        )
    for _ in range(n_each):
        conv = val_corpus.conversations[
            int(rng.integers(len(val_corpus.conversations)))
        ]
        context, user_turn, reply = truncate_context(conv, rng)
        task = data.TaskSample(
            kind=TaskKind.DUAL_INFORMATION,
            instruction=val_corpus.pool.sample("conversation", rng),
            record=user_turn.record,
            target=reply,
            context=context,
        )
        sets["dialog"].append(
            data.text_sample_from_task(
                task, lm, (SlotFill.FROM_CAPTION_TEXT, SlotFill.FROM_TRANSCRIPT_TEXT)
            )
        )
    return sets


def pretrain_language_model(cfg: RunConfig, train_corpus, val_corpus):
    """Build the model, pretrain it on text tasks, and gate on held-out text."""
    section = cfg.section("pretrain")
    lm = new_language_model(cfg)
    samples = data.build_pretrain_samples(
        train_corpus, lm, seed=derive_seed(cfg.seed, "pretrain-data"),
        n_samples=section["n_samples"],
    )
    subset = section["gate_subset"]
    eval_sets = build_text_eval_sets(
        val_corpus, lm, seed=derive_seed(cfg.seed, "pretrain-gates"), n_each=subset
    )

    def gate_fn(handle):
        qa = score_text_samples(handle, eval_sets["qa"])
        asr = score_text_samples(handle, eval_sets["asr"])
        dialog = score_text_samples(handle, eval_sets["dialog"])
        return {
            "qa_accuracy": qa,
            "asr_exact": asr,
            "dialog_exact": dialog,
            "gate_passed": qa >= section["gate_qa_accuracy"]
            and asr >= section["gate_exact_match"]
            and dialog >= section["gate_exact_match"],
        }

    pretrain_cfg = lm_mod.PretrainConfig(
        batch_size=section["batch_size"],
        max_steps=section["max_steps"],
        min_steps=section["min_steps"],
        eval_interval=section["eval_interval"],
        lr=section["lr"],
        weight_decay=section["weight_decay"],
        warmup_steps=section["warmup_steps"],
        seed=derive_seed(cfg.seed, "pretrain"),
        gate_qa_accuracy=section["gate_qa_accuracy"],
    )
    lm_mod.pretrain_text_tasks(samples, pretrain_cfg, lm, gate_fn=gate_fn)
    return lm, pretrain_cfg.log


# ---------------------------------------------------------------------------
# Staged training
# ---------------------------------------------------------------------------


def checkpoint_paths(ckpt_root, stage: str, which: str = "best"):
    base = Path(ckpt_root) / f"stage{stage}" / which
    return base / "para_adapter.npz", base / "ling_adapter.npz"


def save_bundle_adapters(bundle: ModelBundle, ckpt_root, stage: str, state: dict,
                         which: str):
    para_path, ling_path = checkpoint_paths(ckpt_root, stage, which)
    para_path.parent.mkdir(parents=True, exist_ok=True)
    saved = {}
    for name in training.ADAPTER_NAMES:
        saved[name] = {
            k: v.clone() for k, v in bundle.adapter(name).state_dict().items()
        }
        bundle.adapter(name).load_state_dict(state[name])
    adapters_mod.save_adapter(bundle.para_adapter, para_path)
    adapters_mod.save_adapter(bundle.ling_adapter, ling_path)
    for name in training.ADAPTER_NAMES:
        bundle.adapter(name).load_state_dict(saved[name])


def load_bundle(ckpt_dir, lm) -> ModelBundle:
    ckpt_dir = Path(ckpt_dir)
    para_path = ckpt_dir / "para_adapter.npz"
    ling_path = ckpt_dir / "ling_adapter.npz"
    for path in (para_path, ling_path):
        if not path.exists():
            raise DependencyError(f"missing adapter checkpoint {path}")
    return ModelBundle(
        para_adapter=adapters_mod.load_adapter(para_path),
        ling_adapter=adapters_mod.load_adapter(ling_path),
        lm=lm,
    )


def require_stage_prerequisites(ckpt_root, stage: str, lm_path):
    if not Path(lm_path).exists():
        raise DependencyError(f"missing pretrained language model at {lm_path}")
    idx = STAGE_SEQUENCE.index(stage)
    if idx == 0:
        return None
    previous = STAGE_SEQUENCE[idx - 1]
    para_path, ling_path = checkpoint_paths(ckpt_root, previous, "best")
    if not (para_path.exists() and ling_path.exists()):
        raise DependencyError(
            f"stage {stage} requires the stage {previous} best checkpoint "
            f"(expected at {para_path.parent})"
        )
    return para_path.parent


def run_training_stage(cfg: RunConfig, stage: str, corpus_dir, lm_path, ckpt_root):
    if stage not in STAGE_SEQUENCE:
        raise DomainError(f"unknown stage {stage!r}")
    previous_dir = require_stage_prerequisites(ckpt_root, stage, lm_path)
    lm = lm_mod.load_language_model(lm_path)
    if not lm.frozen:
        lm.freeze()
    if previous_dir is None:
        para, ling = new_adapters(cfg)
        bundle = ModelBundle(para, ling, lm)
    else:
        bundle = load_bundle(previous_dir, lm)
    train_corpus = data.load_corpus(corpus_dir, "train")
    val_corpus = data.load_corpus(corpus_dir, "val")
    result = training.run_stage(stage_config(cfg, stage), bundle, train_corpus, val_corpus)
    save_bundle_adapters(bundle, ckpt_root, stage, result.best_state, "best")
    save_bundle_adapters(bundle, ckpt_root, stage, result.last_state, "last")
    log_path = Path(ckpt_root) / f"train_log_stage{stage}.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return result


def run_evaluation(cfg: RunConfig, mode: str, suite: str, corpus_dir, lm_path,
                   ckpt_dir, judge=None, limit=None):
    lm = lm_mod.load_language_model(lm_path)
    if not lm.frozen:
        lm.freeze()
    bundle = load_bundle(ckpt_dir, lm)
    corpus = data.load_corpus(corpus_dir, "test")
    return evaluation.ablation_eval(
        bundle,
        corpus,
        AblationMode(mode),
        suite=suite,
        judge=judge,
        seed=derive_seed(cfg.seed, "eval", suite, mode),
        max_new_tokens=cfg.get("eval", "max_new_tokens"),
        limit=limit,
    )
