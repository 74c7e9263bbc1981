"""Input assembly for the language model.

Builds the embedding sequence fed to the frozen LM: context turns first,
then the instruction, then the paralinguistic slot (soft prompt) and the
linguistic slot (content replacement), then the response span. Also hosts
the equivalence-replacement fill sampler and conversation truncation.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError, InputError
from .frontend import UtteranceRecord
from .lm import ASST, CONTENT, EOT, PARA, SYS, USR, LanguageModelHandle


class TaskKind(enum.Enum):
    LINGUISTIC = "linguistic"
    PARALINGUISTIC = "paralinguistic"
    DUAL_INFORMATION = "dual_information"


class SlotFill(enum.Enum):
    FROM_SPEECH = "speech"
    FROM_CAPTION_TEXT = "caption_text"
    FROM_TRANSCRIPT_TEXT = "transcript_text"
    ABSENT = "none"


_PARA_FILLS = (SlotFill.FROM_SPEECH, SlotFill.FROM_CAPTION_TEXT, SlotFill.ABSENT)
_LING_FILLS = (SlotFill.FROM_SPEECH, SlotFill.FROM_TRANSCRIPT_TEXT, SlotFill.ABSENT)

SEGMENT_ORDER = ("context", "system", "para_slot", "content_slot", "response")


@dataclass(frozen=True)
class Turn:
    """One conversation turn; speech turns carry an utterance record."""

    speaker: str  # "user" | "assistant"
    text: str
    record: UtteranceRecord = None

    def __post_init__(self):
        if self.speaker not in ("user", "assistant"):
            raise DomainError(f"unknown speaker {self.speaker!r}")


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    length: int


@dataclass
class AssembledInput:
    """Embedding sequence plus loss mask and slot metadata.

    token_ids holds the vocabulary id behind each embedding row, or -1 for
    soft rows produced by an adapter. loss_mask is True exactly on the
    target-response token positions.
    """

    embeddings: torch.Tensor
    token_ids: list
    loss_mask: list
    segment_map: list = field(default_factory=list)

    def __len__(self):
        return self.embeddings.shape[0]

    def segment(self, kind: str) -> Segment:
        for seg in self.segment_map:
            if seg.kind == kind:
                return seg
        return None

    def segment_length(self, kind: str) -> int:
        seg = self.segment(kind)
        return 0 if seg is None else seg.length


def sample_err_fills(task_kind: TaskKind, stage: int, rng: np.random.Generator):
    """Slot sources for one sample.

    In stage 2 the slot that the task does not rely on is drawn uniformly
    from {speech, equivalent text, absent}; everywhere else both slots come
    from speech.
    """
    if stage not in (1, 2, 3):
        raise DomainError(f"stage must be 1, 2, or 3, got {stage!r}")
    if stage == 2 and task_kind is TaskKind.LINGUISTIC:
        return _PARA_FILLS[int(rng.integers(3))], SlotFill.FROM_SPEECH
    if stage == 2 and task_kind is TaskKind.PARALINGUISTIC:
        return SlotFill.FROM_SPEECH, _LING_FILLS[int(rng.integers(3))]
    return SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH


def validate_fills(task_kind: TaskKind, para_fill: SlotFill, ling_fill: SlotFill):
    """Training-time fill constraints; ablation evaluation bypasses this."""
    if para_fill not in _PARA_FILLS:
        raise DomainError(f"invalid paralinguistic fill {para_fill}")
    if ling_fill not in _LING_FILLS:
        raise DomainError(f"invalid linguistic fill {ling_fill}")
    if ling_fill is SlotFill.ABSENT and task_kind is not TaskKind.PARALINGUISTIC:
        raise DomainError(
            "linguistic slot may be absent only for paralinguistic-task samples"
        )


def render_turn(turn: Turn) -> str:
    marker = USR if turn.speaker == "user" else ASST
    return f"{marker}{turn.text}{EOT}"


def render_context(context) -> str:
    return "".join(render_turn(t) for t in context)


def build_input(
    context,
    instruction: str,
    record: UtteranceRecord,
    fills,
    adapters,
    lm: LanguageModelHandle,
    target: str = None,
) -> AssembledInput:
    """Assemble one model input.

    fills is (para_fill, ling_fill). adapters is (paralinguistic, linguistic)
    and may be None when both fills are text or absent. With a target the
    response span is appended and masked for training; without one the
    sequence ends at the assistant marker, ready for generation.
    """
    para_fill, ling_fill = fills
    para_adapter, ling_adapter = adapters if adapters is not None else (None, None)
    if para_fill is SlotFill.FROM_SPEECH and para_adapter is None:
        raise InputError("paralinguistic fill from speech requires the adapter")
    if ling_fill is SlotFill.FROM_SPEECH and ling_adapter is None:
        raise InputError("linguistic fill from speech requires the adapter")
    needs_record = (
        para_fill is not SlotFill.ABSENT or ling_fill is not SlotFill.ABSENT
    )
    if needs_record and record is None:
        raise InputError("slot fill requested but sample has no utterance record")

    rows = []
    token_ids = []
    loss_mask = []
    segments = []

    def append_text(text: str):
        ids = lm.tokenizer.encode(text)
        if ids:
            rows.append(lm.embed_ids(ids))
            token_ids.extend(ids)
            loss_mask.extend([False] * len(ids))
        return len(ids)

    def append_soft(embeddings: torch.Tensor):
        rows.append(embeddings)
        token_ids.extend([-1] * embeddings.shape[0])
        loss_mask.extend([False] * embeddings.shape[0])
        return embeddings.shape[0]

    def close_segment(kind: str, start: int):
        length = len(token_ids) - start
        if length > 0:
            segments.append(Segment(kind, start, length))

    start = 0
    append_text(render_context(context or []))
    close_segment("context", start)

    start = len(token_ids)
    append_text(f"{SYS}{instruction}{EOT}{USR}")
    close_segment("system", start)

    start = len(token_ids)
    if para_fill is SlotFill.FROM_SPEECH:
        append_text(PARA)
        append_soft(para_adapter(record.features))
        append_text(PARA)
    elif para_fill is SlotFill.FROM_CAPTION_TEXT:
        append_text(f"{PARA}{record.caption}{PARA}")
    close_segment("para_slot", start)

    start = len(token_ids)
    if ling_fill is SlotFill.FROM_SPEECH:
        append_text(CONTENT)
        append_soft(ling_adapter(record.features))
        append_text(CONTENT)
    elif ling_fill is SlotFill.FROM_TRANSCRIPT_TEXT:
        append_text(f"{CONTENT}{record.transcript_dense}{CONTENT}")
    close_segment("content_slot", start)

    start = len(token_ids)
    append_text(f"{EOT}{ASST}")
    if target is not None:
        target_ids = lm.tokenizer.encode(target) + [lm.eot_id]
        rows.append(lm.embed_ids(target_ids))
        token_ids.extend(target_ids)
        loss_mask.extend([True] * len(target_ids))
    close_segment("response", start)

    embeddings = torch.cat(rows, dim=0) if rows else torch.zeros(0, lm.d_l)
    assembled = AssembledInput(embeddings, token_ids, loss_mask, segments)
    _check_segment_order(assembled)
    return assembled


def _check_segment_order(assembled: AssembledInput):
    order = [seg.kind for seg in assembled.segment_map]
    expected = [k for k in SEGMENT_ORDER if k in order]
    if order != expected:
        raise DomainError(f"segment order violated: {order}")
    cursor = 0
    for seg in assembled.segment_map:
        if seg.start < cursor:
            raise DomainError("overlapping segments")
        cursor = seg.start + seg.length


def render_all_text(
    context, instruction: str, record: UtteranceRecord, target: str = None
) -> str:
    """The fully textual rendering of a sample (both slots as text)."""
    text = render_context(context or [])
    text += f"{SYS}{instruction}{EOT}{USR}"
    text += f"{PARA}{record.caption}{PARA}"
    text += f"{CONTENT}{record.transcript_dense}{CONTENT}"
    text += f"{EOT}{ASST}"
    if target is not None:
        text += f"{target}{EOT}"
    return text


def truncate_context(conversation, rng: np.random.Generator):
    """Pick an assistant turn uniformly; return (context, user turn, reply).

    The context is every turn before the user turn that precedes the chosen
    assistant turn, so both the zero-context and full-context truncations
    are reachable.
    """
    turns = conversation.turns if hasattr(conversation, "turns") else list(conversation)
    candidates = [
        i
        for i in range(1, len(turns))
        if turns[i].speaker == "assistant" and turns[i - 1].speaker == "user"
    ]
    if not candidates:
        raise DomainError("conversation has no user turn followed by an assistant turn")
    t = candidates[int(rng.integers(len(candidates)))]
    return list(turns[: t - 1]), turns[t - 1], turns[t].text
