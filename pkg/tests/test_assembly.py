import numpy as np
import pytest
import torch

from difs.assembly import (
    AssembledInput,
    SEGMENT_ORDER,
    SlotFill,
    TaskKind,
    Turn,
    build_input,
    render_all_text,
    sample_err_fills,
    truncate_context,
    validate_fills,
)
from difs.adapters import (
    LinguisticAdapter,
    LinguisticAdapterConfig,
    ParalinguisticAdapter,
    ParalinguisticAdapterConfig,
)
from difs.errors import DomainError, InputError
from difs.frontend import CONTENT_WORDS, SyntheticFrontend
from difs.lm import build_tokenizer, new_language_model
from helpers import make_attributes


@pytest.fixture(scope="module")
def lm():
    handle = new_language_model(build_tokenizer(), seed=0)
    handle.freeze()
    return handle


@pytest.fixture(scope="module")
def adapters():
    para = ParalinguisticAdapter(ParalinguisticAdapterConfig(), seed=1).eval()
    ling = LinguisticAdapter(LinguisticAdapterConfig(), seed=1).eval()
    return para, ling


@pytest.fixture(scope="module")
def frontend():
    return SyntheticFrontend(d_s=16, seed=9)


def record_of(frontend, n_words=5, seed=0, **attrs):
    transcript = tuple(CONTENT_WORDS[(seed + i) % len(CONTENT_WORDS)] for i in range(n_words))
    return frontend.synth_utterance(make_attributes(**attrs), transcript, seed=seed)


class TestErrSampler:
    def test_stage2_linguistic_distribution(self):
        rng = np.random.default_rng(7)
        counts = {fill: 0 for fill in SlotFill}
        n = 30_000
        for _ in range(n):
            para, ling = sample_err_fills(TaskKind.LINGUISTIC, 2, rng)
            assert ling is SlotFill.FROM_SPEECH
            counts[para] += 1
        for fill in (SlotFill.FROM_SPEECH, SlotFill.FROM_CAPTION_TEXT, SlotFill.ABSENT):
            assert 0.3133 <= counts[fill] / n <= 0.3533

    def test_stage2_paralinguistic_distribution(self):
        rng = np.random.default_rng(8)
        counts = {fill: 0 for fill in SlotFill}
        n = 30_000
        for _ in range(n):
            para, ling = sample_err_fills(TaskKind.PARALINGUISTIC, 2, rng)
            assert para is SlotFill.FROM_SPEECH
            counts[ling] += 1
        for fill in (SlotFill.FROM_SPEECH, SlotFill.FROM_TRANSCRIPT_TEXT, SlotFill.ABSENT):
            assert 0.3133 <= counts[fill] / n <= 0.3533

    @pytest.mark.parametrize("stage", [1, 3])
    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_non_err_paths_always_speech(self, stage, kind):
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert sample_err_fills(kind, stage, rng) == (
                SlotFill.FROM_SPEECH,
                SlotFill.FROM_SPEECH,
            )

    def test_dual_information_stage2_is_speech(self):
        rng = np.random.default_rng(0)
        assert sample_err_fills(TaskKind.DUAL_INFORMATION, 2, rng) == (
            SlotFill.FROM_SPEECH,
            SlotFill.FROM_SPEECH,
        )

    def test_fixed_rng_reproducible(self):
        draws_a = [
            sample_err_fills(TaskKind.PARALINGUISTIC, 2, np.random.default_rng(5))
            for _ in range(1)
        ]
        draws_b = [
            sample_err_fills(TaskKind.PARALINGUISTIC, 2, np.random.default_rng(5))
            for _ in range(1)
        ]
        assert draws_a == draws_b
        rng = np.random.default_rng(11)
        seq_a = [sample_err_fills(TaskKind.LINGUISTIC, 2, rng) for _ in range(20)]
        rng = np.random.default_rng(11)
        seq_b = [sample_err_fills(TaskKind.LINGUISTIC, 2, rng) for _ in range(20)]
        assert seq_a == seq_b

    def test_bad_stage_rejected(self):
        with pytest.raises(DomainError):
            sample_err_fills(TaskKind.LINGUISTIC, 4, np.random.default_rng(0))

    def test_validate_fills_rules(self):
        validate_fills(
            TaskKind.PARALINGUISTIC, SlotFill.FROM_SPEECH, SlotFill.ABSENT
        )
        with pytest.raises(DomainError):
            validate_fills(TaskKind.LINGUISTIC, SlotFill.FROM_SPEECH, SlotFill.ABSENT)
        with pytest.raises(DomainError):
            validate_fills(
                TaskKind.LINGUISTIC, SlotFill.FROM_TRANSCRIPT_TEXT, SlotFill.FROM_SPEECH
            )


class TestBuildInput:
    def test_slot_lengths_from_shape_laws(self, lm, adapters, frontend):
        record = record_of(frontend, n_words=25, seed=1)  # n_s = 100
        assembled = build_input(
            [], "transcribe the speech.", record,
            (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH), adapters, lm,
        )
        assert assembled.segment_length("para_slot") == 10 + 2
        assert assembled.segment_length("content_slot") == 20 + 2
        assert assembled.segment("context") is None

    def test_text_fills_equal_all_text_assembly(self, lm, adapters, frontend):
        record = record_of(frontend, n_words=4, seed=2)
        context = [
            Turn("user", "fa go"),
            Turn("assistant", "ba go"),
        ]
        instruction = "reply to the speaker."
        assembled = build_input(
            context, instruction, record,
            (SlotFill.FROM_CAPTION_TEXT, SlotFill.FROM_TRANSCRIPT_TEXT),
            adapters, lm,
        )
        text = render_all_text(context, instruction, record)
        expected_ids = lm.tokenizer.encode(text)
        assert assembled.token_ids == expected_ids
        assert torch.equal(assembled.embeddings, lm.embed_ids(expected_ids))

    def test_loss_mask_law(self, lm, adapters, frontend):
        record = record_of(frontend, seed=3)
        assembled = build_input(
            [], "speak.", record,
            (SlotFill.FROM_CAPTION_TEXT, SlotFill.FROM_TRANSCRIPT_TEXT),
            adapters, lm, target="yes",
        )
        assert sum(assembled.loss_mask) == 4  # y, e, s, <eot>
        response = assembled.segment("response")
        for pos, masked in enumerate(assembled.loss_mask):
            if masked:
                assert response.start <= pos < response.start + response.length

    def test_mask_never_covers_other_segments(self, lm, adapters, frontend):
        record = record_of(frontend, seed=4)
        assembled = build_input(
            [Turn("user", "ka bi"), Turn("assistant", "ba bi")],
            "respond.", record,
            (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH), adapters, lm,
            target="ba go",
        )
        for seg in assembled.segment_map:
            if seg.kind == "response":
                continue
            for pos in range(seg.start, seg.start + seg.length):
                assert not assembled.loss_mask[pos]

    def test_absent_slots_omit_markers_and_segments(self, lm, adapters, frontend):
        record = record_of(frontend, seed=5)
        assembled = build_input(
            [], "classify the pitch.", record,
            (SlotFill.FROM_SPEECH, SlotFill.ABSENT), adapters, lm,
        )
        assert assembled.segment("content_slot") is None
        content_id = lm.tokenizer.token_id("<content>")
        assert content_id not in assembled.token_ids

    def test_segment_order_invariant(self, lm, adapters, frontend):
        record = record_of(frontend, seed=6)
        assembled = build_input(
            [Turn("user", "ka bi"), Turn("assistant", "ba bi")],
            "respond.", record,
            (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH), adapters, lm,
            target="du",
        )
        kinds = [seg.kind for seg in assembled.segment_map]
        assert kinds == list(SEGMENT_ORDER)

    def test_missing_record_for_fill_rejected(self, lm, adapters):
        with pytest.raises(InputError):
            build_input(
                [], "x", None, (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH),
                adapters, lm,
            )

    def test_missing_adapter_rejected(self, lm, frontend):
        record = record_of(frontend, seed=7)
        with pytest.raises(InputError):
            build_input(
                [], "x", record, (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH),
                None, lm,
            )

    def test_generation_form_has_no_masked_positions(self, lm, adapters, frontend):
        record = record_of(frontend, seed=8)
        assembled = build_input(
            [], "transcribe.", record,
            (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH), adapters, lm,
        )
        assert not any(assembled.loss_mask)
        assert assembled.segment_length("response") == 2  # <eot><asst>

    def test_soft_rows_marked_in_token_ids(self, lm, adapters, frontend):
        record = record_of(frontend, n_words=5, seed=9)
        assembled = build_input(
            [], "t.", record, (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH),
            adapters, lm,
        )
        para = assembled.segment("para_slot")
        soft = assembled.token_ids[para.start + 1 : para.start + para.length - 1]
        assert soft == [-1] * 10


def conversation_turns(n_exchanges):
    turns = []
    for i in range(n_exchanges):
        turns.append(Turn("user", f"ka bi ba{i}"))
        turns.append(Turn("assistant", f"ba ki{i}"))
    return turns


class TestTruncateContext:
    def test_uniform_over_assistant_turns(self):
        turns = conversation_turns(3)
        rng = np.random.default_rng(13)
        counts = {0: 0, 1: 0, 2: 0}
        n = 10_000
        for _ in range(n):
            context, user_turn, _ = truncate_context(turns, rng)
            counts[len(context) // 2] += 1
        for choice in counts.values():
            assert 0.287 <= choice / n <= 0.380

    def test_two_turn_dialogue_always_zero_context(self):
        turns = conversation_turns(1)
        context, user_turn, target = truncate_context(turns, np.random.default_rng(0))
        assert context == []
        assert user_turn is turns[0]
        assert target == turns[1].text

    def test_zero_and_full_context_reachable(self):
        turns = conversation_turns(3)
        rng = np.random.default_rng(3)
        lengths = {len(truncate_context(turns, rng)[0]) for _ in range(200)}
        assert 0 in lengths and 4 in lengths

    def test_deterministic_under_fixed_rng(self):
        turns = conversation_turns(3)
        a = truncate_context(turns, np.random.default_rng(21))
        b = truncate_context(turns, np.random.default_rng(21))
        assert a == b

    def test_no_assistant_turn_rejected(self):
        with pytest.raises(DomainError):
            truncate_context([Turn("user", "ka")], np.random.default_rng(0))
