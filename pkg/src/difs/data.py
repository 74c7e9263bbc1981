"""Task construction, prompt pools, manifests, and the synthetic corpus.

Three task families: transcription (linguistic), speaker-attribute
classification (paralinguistic), and conversational response generation
(dual information). Conversations are scripted so that the reply to an
utterance is a deterministic function of its emotion and last word, which
keeps the behavior-alignment task learnable at desk scale while remaining
style-sensitive.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import assembly
from .assembly import SlotFill, TaskKind, Turn, truncate_context
from .errors import ContractError, DomainError, ParseError, ValidationError
from .frontend import (
    ATTRIBUTE_NAMES,
    AttributeLabelSet,
    AttributeVocabulary,
    CONTENT_WORDS,
    MOOD_WORDS,
    SyntheticFrontend,
    UtteranceRecord,
    derive_utterance_seed,
    read_feature_file,
    write_feature_file,
)
from .lm import LanguageModelHandle
from .rng import derive_seed, np_rng

ATTRIBUTE_TARGET_TEMPLATE = "The {attribute} is {label}."

# Emotion -> reserved reply word; scripted assistant replies are
# "<mood word> <last word of the user utterance>".
MOOD_BY_EMOTION = {
    "neutral": MOOD_WORDS[0],
    "happy": MOOD_WORDS[1],
    "sad": MOOD_WORDS[2],
    "angry": MOOD_WORDS[3],
    "surprised": MOOD_WORDS[4],
}

DEFAULT_PROMPTS = {
    "asr": (
        "transcribe the speech.",
        "write the spoken words.",
        "repeat what you hear.",
    ),
    "attribute:gender": (
        "name the gender. choices: {choices}.",
        "gender of the voice? {choices}.",
        "pick the gender from: {choices}.",
    ),
    "attribute:pitch": (
        "name the pitch. choices: {choices}.",
        "pitch of the voice? {choices}.",
        "pick the pitch from: {choices}.",
    ),
    "attribute:tempo": (
        "name the tempo. choices: {choices}.",
        "tempo of the voice? {choices}.",
        "pick the tempo from: {choices}.",
    ),
    "attribute:energy": (
        "name the energy. choices: {choices}.",
        "energy of the voice? {choices}.",
        "pick the energy from: {choices}.",
    ),
    "attribute:emotion": (
        "name the emotion. choices: {choices}.",
        "emotion of the voice? {choices}.",
        "pick the emotion from: {choices}.",
    ),
    "conversation": (
        "continue the chat.",
        "reply to the speaker.",
        "answer the last message.",
    ),
}


class PromptPool:
    """Instruction templates grouped by section, e.g. 'attribute:pitch'."""

    def __init__(self, sections=None):
        self.sections = {
            name: tuple(templates)
            for name, templates in (sections or DEFAULT_PROMPTS).items()
        }
        for name, templates in self.sections.items():
            if len(templates) < 3:
                raise DomainError(f"prompt section {name!r} needs >= 3 templates")

    def templates(self, section: str):
        if section not in self.sections:
            raise DomainError(f"unknown prompt section {section!r}")
        return self.sections[section]

    def sample(self, section: str, rng: np.random.Generator) -> str:
        templates = self.templates(section)
        return templates[int(rng.integers(len(templates)))]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for name in sorted(self.sections):
                fh.write(f"[{name}]\n")
                for template in self.sections[name]:
                    fh.write(template + "\n")

    @classmethod
    def load(cls, path):
        sections = {}
        current = None
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                if line.startswith("[") and line.endswith("]"):
                    current = line[1:-1]
                    sections.setdefault(current, [])
                elif current is None:
                    raise ParseError("template before any [section] header", line_no)
                else:
                    sections[current].append(line)
        return cls(sections)


@dataclass
class TaskSample:
    """One training or evaluation item."""

    kind: TaskKind
    instruction: str
    record: UtteranceRecord
    target: str
    choices: tuple = None
    context: list = field(default_factory=list)
    attribute: str = None

    def __post_init__(self):
        if not self.target:
            raise ValidationError("target must be non-empty", field="target")
        if self.kind is TaskKind.PARALINGUISTIC:
            if not self.choices:
                raise ValidationError(
                    "paralinguistic sample needs choices", field="choices"
                )
            hits = [c for c in self.choices if _contains_word(self.target, c)]
            if len(hits) != 1:
                raise ValidationError(
                    f"target must name exactly one choice, found {hits}", field="target"
                )
        if self.kind is TaskKind.LINGUISTIC and self.record is not None:
            if self.target != self.record.transcript_text:
                raise ValidationError(
                    "linguistic target must equal the transcript rendering",
                    field="target",
                )


def _contains_word(text: str, word: str) -> bool:
    import re

    return re.search(rf"(?<![a-zA-Z]){re.escape(word)}(?![a-zA-Z])", text) is not None


def scripted_reply(record: UtteranceRecord) -> str:
    """Deterministic conversational reply: mood word plus echoed last word."""
    mood = MOOD_BY_EMOTION[record.attributes.emotion]
    return f"{mood} {record.transcript[-1]}"


def dense_labels(record: UtteranceRecord) -> str:
    """Compact attribute rendering: the five label words, no separators.

    Label words are single tokens, so this tokenizes to exactly five rows;
    used during pretraining as a slot format closer in shape to the
    adapter's fixed-length output than the full caption sentence.
    """
    return "".join(record.attributes.label(a) for a in ATTRIBUTE_NAMES)


def build_asr_sample(record: UtteranceRecord, pool: PromptPool, rng) -> TaskSample:
    instruction = pool.sample("asr", rng)
    return TaskSample(
        kind=TaskKind.LINGUISTIC,
        instruction=instruction,
        record=record,
        target=record.transcript_text,
    )


def build_attribute_sample(
    record: UtteranceRecord, attribute: str, pool: PromptPool, rng
) -> TaskSample:
    if attribute not in ATTRIBUTE_NAMES:
        raise DomainError(f"unknown attribute {attribute!r}")
    choices = record.attributes.vocabulary.labels(attribute)
    shuffled = list(choices)
    rng.shuffle(shuffled)
    template = pool.sample(f"attribute:{attribute}", rng)
    instruction = template.format(choices=", ".join(shuffled))
    target = ATTRIBUTE_TARGET_TEMPLATE.format(
        attribute=attribute, label=record.attributes.label(attribute)
    )
    return TaskSample(
        kind=TaskKind.PARALINGUISTIC,
        instruction=instruction,
        record=record,
        target=target,
        choices=choices,
        attribute=attribute,
    )


def build_alignment_sample(
    conversation, rng, lm: LanguageModelHandle, pool: PromptPool,
    max_new_tokens: int = 24,
) -> TaskSample:
    """Dual-information sample whose target is the frozen model's own reply
    to the fully textual rendering of the same input."""
    if not lm.frozen:
        raise ContractError(
            "alignment targets must come from the frozen language model"
        )
    context, user_turn, _scripted = truncate_context(conversation, rng)
    if user_turn.record is None:
        raise DomainError("final user turn carries no utterance record")
    instruction = pool.sample("conversation", rng)
    text_input = assembly.build_input(
        context,
        instruction,
        user_turn.record,
        (SlotFill.FROM_CAPTION_TEXT, SlotFill.FROM_TRANSCRIPT_TEXT),
        adapters=None,
        lm=lm,
    )
    target = lm.generate(text_input, max_new_tokens=max_new_tokens)
    if not target:
        target = " "
    return TaskSample(
        kind=TaskKind.DUAL_INFORMATION,
        instruction=instruction,
        record=user_turn.record,
        target=target,
        context=context,
    )


@dataclass
class Conversation:
    conversation_id: str
    turns: list

    def reversed_roles(self) -> "Conversation":
        flipped = [
            Turn(
                speaker="assistant" if t.speaker == "user" else "user",
                text=t.text,
                record=t.record,
            )
            for t in self.turns
        ]
        return Conversation(self.conversation_id + "-rev", flipped)


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

_MANIFEST_FIELDS = ("utterance_id", "feature_path", "transcript") + ATTRIBUTE_NAMES


def load_manifest(path, attribute_vocab: AttributeVocabulary = None):
    """Read an utterance manifest; returns records ordered by utterance_id.

    feature_path entries are resolved relative to the manifest location.
    """
    attribute_vocab = attribute_vocab or AttributeVocabulary()
    base = Path(os.fspath(path)).parent
    records = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line_no) from None
            if not isinstance(obj, dict):
                raise ParseError("manifest line is not an object", line_no)
            for fname in _MANIFEST_FIELDS:
                if fname not in obj:
                    raise ValidationError(
                        "missing required field", field=fname, line_no=line_no
                    )
            utterance_id = obj["utterance_id"]
            if utterance_id in records:
                raise ValidationError(
                    f"duplicate utterance_id {utterance_id!r}",
                    field="utterance_id",
                    line_no=line_no,
                )
            try:
                attributes = AttributeLabelSet(
                    **{a: obj[a] for a in ATTRIBUTE_NAMES}, vocabulary=attribute_vocab
                )
            except DomainError as exc:
                raise ValidationError(str(exc), field="attributes", line_no=line_no)
            transcript = tuple(str(obj["transcript"]).split())
            if not transcript:
                raise ValidationError(
                    "transcript must be non-empty", field="transcript", line_no=line_no
                )
            features = read_feature_file(base / obj["feature_path"])
            records[utterance_id] = UtteranceRecord(
                utterance_id=utterance_id,
                features=features,
                transcript=transcript,
                attributes=attributes,
            )
    d_widths = {r.features.d_s for r in records.values()}
    if len(d_widths) > 1:
        raise ValidationError(
            f"inconsistent feature width across corpus: {sorted(d_widths)}",
            field="feature_path",
        )
    return dict(sorted(records.items()))


def load_conversations(path, records: dict):
    conversations = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line_no) from None
            cid = obj.get("conversation_id")
            if cid is None:
                raise ValidationError(
                    "missing required field", field="conversation_id", line_no=line_no
                )
            if cid in seen:
                raise ValidationError(
                    f"duplicate conversation_id {cid!r}",
                    field="conversation_id",
                    line_no=line_no,
                )
            seen.add(cid)
            turns = []
            for turn_obj in obj.get("turns", []):
                speaker = turn_obj.get("speaker")
                if "utterance_id" in turn_obj:
                    record = records.get(turn_obj["utterance_id"])
                    if record is None:
                        raise ValidationError(
                            f"unknown utterance_id {turn_obj['utterance_id']!r}",
                            field="utterance_id",
                            line_no=line_no,
                        )
                    turns.append(
                        Turn(speaker=speaker, text=record.transcript_text, record=record)
                    )
                elif "text" in turn_obj:
                    turns.append(Turn(speaker=speaker, text=turn_obj["text"]))
                else:
                    raise ValidationError(
                        "turn needs utterance_id or text", field="turns", line_no=line_no
                    )
            conversations.append(Conversation(cid, turns))
    return conversations


# ---------------------------------------------------------------------------
# Corpus synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_conversations: int = 300
    d_s: int = 16
    min_words: int = 3
    max_words: int = 5
    max_exchanges: int = 3
    noise_sigma: float = 0.05
    seed: int = 0


SPLITS = ("train", "val", "test")


def _split_counts(config: CorpusConfig):
    utterances = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    conv_val = max(1, config.n_conversations // 10)
    conv_test = max(1, config.n_conversations // 10)
    conversations = {
        "train": config.n_conversations - conv_val - conv_test,
        "val": conv_val,
        "test": conv_test,
    }
    return utterances, conversations


def _random_attributes(vocab: AttributeVocabulary, rng) -> AttributeLabelSet:
    labels = {
        attr: vocab.labels(attr)[int(rng.integers(len(vocab.labels(attr))))]
        for attr in ATTRIBUTE_NAMES
    }
    return AttributeLabelSet(**labels, vocabulary=vocab)


def _random_transcript(config: CorpusConfig, rng):
    n = int(rng.integers(config.min_words, config.max_words + 1))
    return tuple(
        CONTENT_WORDS[int(rng.integers(len(CONTENT_WORDS)))] for _ in range(n)
    )


def generate_corpus(config: CorpusConfig, out_dir, pool: PromptPool = None):
    """Write feature files, manifests, conversations, prompts, and bases.

    Byte-identical for a fixed config; returns a per-split summary."""
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    vocab = AttributeVocabulary()
    frontend = SyntheticFrontend(
        d_s=config.d_s, seed=config.seed, noise_sigma=config.noise_sigma
    )
    frontend.save_bases(out_dir / "bases.npz")
    (pool or PromptPool()).save(out_dir / "prompts.txt")

    utt_counts, conv_counts = _split_counts(config)
    summary = {"splits": {}, "attribute_counts": {a: {} for a in ATTRIBUTE_NAMES}}

    def make_record(utterance_id, transcript, attributes):
        record = frontend.synth_utterance(
            attributes,
            transcript,
            seed=derive_utterance_seed(config.seed, utterance_id),
            utterance_id=utterance_id,
        )
        write_feature_file(features_dir / f"{utterance_id}.feat", record.features)
        for attr in ATTRIBUTE_NAMES:
            label = attributes.label(attr)
            counts = summary["attribute_counts"][attr]
            counts[label] = counts.get(label, 0) + 1
        return record

    for split in SPLITS:
        rng = np_rng(config.seed, "corpus", split)
        records = []
        for i in range(utt_counts[split]):
            utterance_id = f"{split}-{i:05d}"
            records.append(
                make_record(
                    utterance_id,
                    _random_transcript(config, rng),
                    _random_attributes(vocab, rng),
                )
            )
        conversations = []
        for c in range(conv_counts[split]):
            cid = f"{split}-conv-{c:04d}"
            n_exchanges = int(rng.integers(1, config.max_exchanges + 1))
            turns = []
            for e in range(n_exchanges):
                user = make_record(
                    f"{cid}-u{e}",
                    _random_transcript(config, rng),
                    _random_attributes(vocab, rng),
                )
                reply_words = tuple(scripted_reply(user).split())
                assistant = make_record(
                    f"{cid}-a{e}", reply_words, _random_attributes(vocab, rng)
                )
                records.extend([user, assistant])
                turns.append({"speaker": "user", "utterance_id": user.utterance_id})
                turns.append(
                    {"speaker": "assistant", "utterance_id": assistant.utterance_id}
                )
            conversations.append({"conversation_id": cid, "turns": turns})

        with open(out_dir / f"manifest_{split}.jsonl", "w", encoding="utf-8") as fh:
            for record in sorted(records, key=lambda r: r.utterance_id):
                fh.write(
                    json.dumps(
                        {
                            "utterance_id": record.utterance_id,
                            "feature_path": f"features/{record.utterance_id}.feat",
                            "transcript": record.transcript_text,
                            **record.attributes.as_dict(),
                        }
                    )
                    + "\n"
                )
        with open(
            out_dir / f"conversations_{split}.jsonl", "w", encoding="utf-8"
        ) as fh:
            for conv in conversations:
                fh.write(json.dumps(conv) + "\n")
        summary["splits"][split] = {
            "utterances": len(records),
            "standalone_utterances": utt_counts[split],
            "conversations": len(conversations),
        }

    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


@dataclass
class Corpus:
    """One split of a generated corpus, fully loaded."""

    split: str
    records: dict
    conversations: list
    pool: PromptPool
    frontend: SyntheticFrontend

    @property
    def record_list(self):
        return list(self.records.values())


def load_corpus(corpus_dir, split: str) -> Corpus:
    corpus_dir = Path(corpus_dir)
    if split not in SPLITS:
        raise DomainError(f"unknown split {split!r}")
    records = load_manifest(corpus_dir / f"manifest_{split}.jsonl")
    conversations = load_conversations(
        corpus_dir / f"conversations_{split}.jsonl", records
    )
    pool = PromptPool.load(corpus_dir / "prompts.txt")
    frontend = SyntheticFrontend.load_bases(corpus_dir / "bases.npz")
    return Corpus(split, records, conversations, pool, frontend)


# ---------------------------------------------------------------------------
# Text pretraining corpus
# ---------------------------------------------------------------------------


@dataclass
class TextTaskSample:
    """Token-level rendering of a task for language-model pretraining."""

    token_ids: list
    loss_mask: list
    kind: TaskKind
    meta: dict = field(default_factory=dict)


def text_sample_from_task(task: TaskSample, lm: LanguageModelHandle, fills) -> TextTaskSample:
    assembled = assembly.build_input(
        task.context, task.instruction, task.record, fills, adapters=None, lm=lm,
        target=task.target,
    )
    return TextTaskSample(
        token_ids=list(assembled.token_ids),
        loss_mask=list(assembled.loss_mask),
        kind=task.kind,
        meta={"target": task.target, "attribute": task.attribute,
              "choices": task.choices},
    )


def compose_text_sample(kind: TaskKind, context, instruction: str, para_text,
                        content_text, target: str, lm: LanguageModelHandle,
                        meta=None) -> TextTaskSample:
    """Text task in the canonical assembly layout with raw slot strings.

    Mirrors build_input's rendering exactly, but lets pretraining vary the
    slot formats beyond the fixed fill renderings.
    """
    from .lm import ASST, CONTENT, EOT, PARA, SYS, USR

    text = assembly.render_context(context or [])
    text += f"{SYS}{instruction}{EOT}{USR}"
    if para_text is not None:
        text += f"{PARA}{para_text}{PARA}"
    if content_text is not None:
        text += f"{CONTENT}{content_text}{CONTENT}"
    text += f"{EOT}{ASST}"
    prompt_ids = lm.tokenizer.encode(text)
    target_ids = lm.tokenizer.encode(target) + [lm.eot_id]
    return TextTaskSample(
        token_ids=prompt_ids + target_ids,
        loss_mask=[False] * len(prompt_ids) + [True] * len(target_ids),
        kind=kind,
        meta=meta or {},
    )


def _para_variant(record, rng, allow_absent: bool):
    choices = [record.caption, dense_labels(record)]
    if allow_absent:
        choices.append(None)
    return choices[int(rng.integers(len(choices)))]


def build_pretrain_samples(
    corpus: Corpus, lm: LanguageModelHandle, seed: int, n_samples: int,
    mixture=(0.33, 0.42, 0.25),
):
    """Text renderings for pretraining: transcription copy, attribute QA,
    and scripted dialogue replies, in the given proportions.

    Slot formats are varied so the frozen model learns every rendering it
    will meet later: full captions and compact label blocks in the
    paralinguistic slot, dense transcripts in the content slot, and absent
    slots.
    """
    rng = np_rng(seed, "pretrain-corpus", corpus.split)
    records = corpus.record_list
    samples = []
    kinds = (TaskKind.LINGUISTIC, TaskKind.PARALINGUISTIC, TaskKind.DUAL_INFORMATION)
    for _ in range(n_samples):
        kind = kinds[int(rng.choice(3, p=mixture))]
        if kind is TaskKind.DUAL_INFORMATION and corpus.conversations:
            conv = corpus.conversations[int(rng.integers(len(corpus.conversations)))]
            context, user_turn, reply = truncate_context(conv, rng)
            record = user_turn.record
            samples.append(
                compose_text_sample(
                    kind, context, corpus.pool.sample("conversation", rng),
                    _para_variant(record, rng, allow_absent=False),
                    record.transcript_dense, reply, lm,
                )
            )
        elif kind is TaskKind.PARALINGUISTIC:
            record = records[int(rng.integers(len(records)))]
            attribute = ATTRIBUTE_NAMES[int(rng.integers(len(ATTRIBUTE_NAMES)))]
            task = build_attribute_sample(record, attribute, corpus.pool, rng)
            content = record.transcript_dense if rng.integers(2) == 0 else None
            samples.append(
                compose_text_sample(
                    kind, [], task.instruction,
                    _para_variant(record, rng, allow_absent=False),
                    content, task.target, lm,
                    meta={"choices": task.choices, "label": task.target},
                )
            )
        else:
            record = records[int(rng.integers(len(records)))]
            task = build_asr_sample(record, corpus.pool, rng)
            samples.append(
                compose_text_sample(
                    kind, [], task.instruction,
                    _para_variant(record, rng, allow_absent=True),
                    record.transcript_dense, task.target, lm,
                )
            )
    return samples
