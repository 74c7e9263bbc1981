import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from helpers import make_attributes, transcript_of

from difs.assembly import SlotFill, TaskKind, Turn
from difs.data import (
    Conversation,
    CorpusConfig,
    DEFAULT_PROMPTS,
    PromptPool,
    build_alignment_sample,
    build_asr_sample,
    build_attribute_sample,
    build_pretrain_samples,
    generate_corpus,
    load_corpus,
    load_manifest,
    scripted_reply,
    text_sample_from_task,
)
from difs.errors import ContractError, DomainError, ParseError, ValidationError
from difs.evaluation import parse_choice_response
from difs.frontend import ATTRIBUTE_NAMES, AttributeVocabulary, MOOD_WORDS, \
    SyntheticFrontend, write_feature_file
from difs.lm import build_tokenizer, new_language_model


@pytest.fixture(scope="module")
def frontend():
    return SyntheticFrontend(d_s=16, seed=3)


@pytest.fixture(scope="module")
def pool():
    return PromptPool()


def record_of(frontend, seed=0, **attrs):
    return frontend.synth_utterance(
        make_attributes(**attrs), transcript_of(4, offset=seed), seed=seed
    )


class TestPromptPool:
    def test_sections_have_three_templates(self, pool):
        for section in ("asr", "conversation") + tuple(
            f"attribute:{a}" for a in ATTRIBUTE_NAMES
        ):
            assert len(pool.templates(section)) >= 3

    def test_no_target_leakage(self, pool):
        labels = set(AttributeVocabulary().answer_words())
        for templates in pool.sections.values():
            for template in templates:
                words = set(template.replace(".", " ").replace(",", " ").split())
                assert not words & labels

    def test_save_load_round_trip(self, pool, tmp_path):
        path = tmp_path / "prompts.txt"
        pool.save(path)
        loaded = PromptPool.load(path)
        assert loaded.sections == pool.sections

    def test_unknown_section_rejected(self, pool):
        with pytest.raises(DomainError):
            pool.templates("attribute:timbre")

    def test_too_small_section_rejected(self):
        with pytest.raises(DomainError):
            PromptPool({**DEFAULT_PROMPTS, "asr": ("only one",)})


class TestAsrSample:
    def test_target_is_transcript_rendering(self, frontend, pool):
        record = record_of(frontend, seed=1)
        sample = build_asr_sample(record, pool, np.random.default_rng(0))
        assert sample.target == record.transcript_text
        assert sample.kind is TaskKind.LINGUISTIC
        assert sample.context == []

    def test_every_template_observed(self, frontend, pool):
        record = record_of(frontend, seed=2)
        rng = np.random.default_rng(1)
        seen = {
            build_asr_sample(record, pool, rng).instruction for _ in range(1000)
        }
        assert seen == set(pool.templates("asr"))


class TestAttributeSample:
    def test_target_template(self, frontend, pool):
        record = record_of(frontend, seed=3, emotion="happy")
        sample = build_attribute_sample(record, "emotion", pool, np.random.default_rng(0))
        assert sample.target == "The emotion is happy."
        assert sample.kind is TaskKind.PARALINGUISTIC

    def test_round_trip_over_all_labels(self, frontend, pool):
        vocab = AttributeVocabulary()
        rng = np.random.default_rng(2)
        for attribute in ATTRIBUTE_NAMES:
            for label in vocab.labels(attribute):
                record = record_of(frontend, seed=5, **{attribute: label})
                sample = build_attribute_sample(record, attribute, pool, rng)
                assert parse_choice_response(sample.target, sample.choices) == label

    def test_choices_listed_in_instruction(self, frontend, pool):
        record = record_of(frontend, seed=6)
        rng = np.random.default_rng(3)
        sample = build_attribute_sample(record, "pitch", pool, rng)
        for choice in sample.choices:
            assert choice in sample.instruction

    def test_unknown_attribute_rejected(self, frontend, pool):
        record = record_of(frontend, seed=7)
        with pytest.raises(DomainError):
            build_attribute_sample(record, "timbre", pool, np.random.default_rng(0))


class TestAlignmentSample:
    def make_conversation(self, frontend, cid="c0"):
        user = record_of(frontend, seed=11, emotion="sad")
        assistant = frontend.synth_utterance(
            make_attributes(), tuple(scripted_reply(user).split()), seed=12
        )
        turns = [
            Turn("user", user.transcript_text, user),
            Turn("assistant", assistant.transcript_text, assistant),
        ]
        return Conversation(cid, turns)

    def test_requires_frozen_lm(self, frontend, pool):
        lm = new_language_model(build_tokenizer(), seed=0)
        conv = self.make_conversation(frontend)
        with pytest.raises(ContractError):
            build_alignment_sample(conv, np.random.default_rng(0), lm, pool)

    def test_deterministic_target(self, frontend, pool):
        lm = new_language_model(build_tokenizer(), seed=0)
        lm.freeze()
        conv = self.make_conversation(frontend)
        a = build_alignment_sample(conv, np.random.default_rng(4), lm, pool)
        b = build_alignment_sample(conv, np.random.default_rng(4), lm, pool)
        assert a.target == b.target
        assert a.kind is TaskKind.DUAL_INFORMATION

    def test_empty_conversation_rejected(self, frontend, pool):
        lm = new_language_model(build_tokenizer(), seed=0)
        lm.freeze()
        with pytest.raises(DomainError):
            build_alignment_sample(
                Conversation("c1", []), np.random.default_rng(0), lm, pool
            )


class TestScriptedReply:
    def test_mood_word_reflects_emotion(self, frontend):
        record = record_of(frontend, seed=13, emotion="sad")
        reply = scripted_reply(record)
        mood, echo = reply.split()
        assert mood == MOOD_WORDS[2]
        assert echo == record.transcript[-1]

    def test_differs_across_emotions(self, frontend):
        sad = record_of(frontend, seed=14, emotion="sad")
        happy = record_of(frontend, seed=14, emotion="happy")
        assert scripted_reply(sad) != scripted_reply(happy)


def write_manifest(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def manifest_line(frontend, tmp_path, utterance_id, **overrides):
    record = record_of(frontend, seed=sum(map(ord, utterance_id)))
    feature_path = f"{utterance_id}.feat"
    write_feature_file(tmp_path / feature_path, record.features)
    obj = {
        "utterance_id": utterance_id,
        "feature_path": feature_path,
        "transcript": record.transcript_text,
        **record.attributes.as_dict(),
    }
    obj.update(overrides)
    return json.dumps(obj)


class TestManifest:
    def test_well_formed_three_lines(self, frontend, tmp_path):
        path = tmp_path / "manifest.jsonl"
        write_manifest(
            path,
            [manifest_line(frontend, tmp_path, f"u{i}") for i in range(3)],
        )
        records = load_manifest(path)
        assert len(records) == 3
        assert list(records) == sorted(records)

    def test_missing_field_names_line_and_field(self, frontend, tmp_path):
        path = tmp_path / "manifest.jsonl"
        line1 = manifest_line(frontend, tmp_path, "u0")
        line2 = json.loads(manifest_line(frontend, tmp_path, "u1"))
        del line2["emotion"]
        write_manifest(path, [line1, json.dumps(line2)])
        with pytest.raises(ValidationError) as err:
            load_manifest(path)
        assert "line 2" in str(err.value)
        assert "emotion" in str(err.value)

    def test_duplicate_utterance_id_rejected(self, frontend, tmp_path):
        path = tmp_path / "manifest.jsonl"
        line = manifest_line(frontend, tmp_path, "dup")
        write_manifest(path, [line, line])
        with pytest.raises(ValidationError, match="duplicate"):
            load_manifest(path)

    def test_malformed_json_names_line(self, frontend, tmp_path):
        path = tmp_path / "manifest.jsonl"
        write_manifest(path, [manifest_line(frontend, tmp_path, "u0"), "{not json"])
        with pytest.raises(ParseError, match="line 2"):
            load_manifest(path)

    def test_bad_label_rejected(self, frontend, tmp_path):
        path = tmp_path / "manifest.jsonl"
        write_manifest(
            path, [manifest_line(frontend, tmp_path, "u0", emotion="bored")]
        )
        with pytest.raises(ValidationError):
            load_manifest(path)


def tiny_corpus_config(seed=0):
    return CorpusConfig(
        n_train=12, n_val=6, n_test=6, n_conversations=6, seed=seed
    )


def dir_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestCorpusGeneration:
    def test_counts_and_loading(self, tmp_path):
        out = tmp_path / "corpus"
        summary = generate_corpus(tiny_corpus_config(), out)
        assert summary["splits"]["train"]["standalone_utterances"] == 12
        corpus = load_corpus(out, "train")
        assert len(corpus.conversations) == summary["splits"]["train"]["conversations"]
        assert all(r.features.d_s == 16 for r in corpus.record_list)

    def test_byte_identical_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_corpus(tiny_corpus_config(seed=5), a)
        generate_corpus(tiny_corpus_config(seed=5), b)
        assert dir_digest(a) == dir_digest(b)
        c = tmp_path / "c"
        generate_corpus(tiny_corpus_config(seed=6), c)
        assert dir_digest(a) != dir_digest(c)

    def test_splits_disjoint_by_utterance_id(self, tmp_path):
        out = tmp_path / "corpus"
        generate_corpus(tiny_corpus_config(), out)
        ids = {
            split: set(load_corpus(out, split).records) for split in ("train", "val", "test")
        }
        assert not ids["train"] & ids["val"]
        assert not ids["train"] & ids["test"]
        assert not ids["val"] & ids["test"]

    def test_conversations_reference_records_with_speech(self, tmp_path):
        out = tmp_path / "corpus"
        generate_corpus(tiny_corpus_config(), out)
        corpus = load_corpus(out, "val")
        for conv in corpus.conversations:
            assert conv.turns[0].speaker == "user"
            for turn in conv.turns:
                assert turn.record is not None
        reversed_conv = corpus.conversations[0].reversed_roles()
        assert reversed_conv.turns[0].speaker == "assistant"
        assert reversed_conv.conversation_id.endswith("-rev")

    def test_assistant_turns_follow_reply_script(self, tmp_path):
        out = tmp_path / "corpus"
        generate_corpus(tiny_corpus_config(), out)
        corpus = load_corpus(out, "train")
        for conv in corpus.conversations:
            for i in range(0, len(conv.turns), 2):
                user, assistant = conv.turns[i], conv.turns[i + 1]
                assert assistant.text == scripted_reply(user.record)


class TestPretrainSamples:
    def test_text_samples_cover_all_kinds(self, tmp_path):
        out = tmp_path / "corpus"
        generate_corpus(tiny_corpus_config(), out)
        corpus = load_corpus(out, "train")
        lm = new_language_model(build_tokenizer(), seed=0)
        samples = build_pretrain_samples(corpus, lm, seed=1, n_samples=60)
        kinds = {s.kind for s in samples}
        assert kinds == set(TaskKind)
        for sample in samples:
            assert any(sample.loss_mask)
            assert not sample.loss_mask[0]
            assert all(t >= 0 for t in sample.token_ids)

    def test_text_sample_target_span(self, frontend, pool):
        lm = new_language_model(build_tokenizer(), seed=0)
        record = record_of(frontend, seed=21)
        task = build_asr_sample(record, pool, np.random.default_rng(0))
        text = text_sample_from_task(
            task, lm, (SlotFill.ABSENT, SlotFill.FROM_TRANSCRIPT_TEXT)
        )
        target_ids = [t for t, m in zip(text.token_ids, text.loss_mask) if m]
        assert lm.tokenizer.decode(target_ids) == task.target + "<eot>"
