"""Metrics and the evaluation protocol.

Word error rate and weighted accuracy kernels, choice parsing for
sentence-format answers, the embedding-ablation modes (paralinguistic only,
linguistic only, both), and judge-scored conversation evaluation.
"""

import enum
import json
import re
from dataclasses import dataclass, field

from . import assembly, data
from .assembly import SlotFill, TaskKind
from .errors import DomainError
from .judge import judge_cs, judge_egs
from .rng import np_rng


def normalize_words(text):
    """Lowercase whitespace tokenization used for error-rate scoring."""
    if isinstance(text, str):
        return text.lower().split()
    return [str(w).lower() for w in text]


def edit_distance(reference, hypothesis) -> int:
    """Minimum edit distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(reference), list(hypothesis)
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i]
        for j, h in enumerate(hyp, start=1):
            if r == h:
                current.append(previous[j - 1])
            else:
                current.append(1 + min(previous[j - 1], previous[j], current[-1]))
        previous = current
    return previous[-1]


def wer(reference, hypothesis) -> float:
    """(substitutions + deletions + insertions) / |reference|; may exceed 1."""
    ref = normalize_words(reference)
    hyp = normalize_words(hypothesis)
    if not ref:
        raise DomainError("reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


def weighted_accuracy(predictions, golds) -> float:
    """Fraction of positions where prediction equals gold."""
    if len(predictions) != len(golds):
        raise DomainError(
            f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds"
        )
    if not golds:
        raise DomainError("need at least one prediction/gold pair")
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def balanced_accuracy(predictions, golds) -> float:
    """Mean per-class recall over the gold classes."""
    if len(predictions) != len(golds):
        raise DomainError("length mismatch")
    if not golds:
        raise DomainError("need at least one prediction/gold pair")
    recalls = []
    for label in sorted(set(golds)):
        hits = sum(1 for p, g in zip(predictions, golds) if g == label and p == g)
        total = sum(1 for g in golds if g == label)
        recalls.append(hits / total)
    return sum(recalls) / len(recalls)


def _word_pattern(choice: str):
    return re.compile(rf"(?<![a-zA-Z]){re.escape(choice)}(?![a-zA-Z])")


def parse_choice_response(response: str, choices):
    """Return the unique choice named in the response, else None.

    Choices must be pairwise unambiguous: no choice may appear as a whole
    word inside another (plain substrings like 'male' in 'female' are fine
    because matching is word-bounded).
    """
    choices = list(choices)
    if not choices:
        raise DomainError("choices must be non-empty")
    for a in choices:
        for b in choices:
            if a != b and _word_pattern(a).search(b):
                raise DomainError(f"ambiguous choices: {a!r} occurs inside {b!r}")
    matched = [c for c in choices if _word_pattern(c).search(response)]
    if len(matched) == 1:
        return matched[0]
    return None


class AblationMode(enum.Enum):
    """Which embedding slots are present at evaluation time."""

    P = "P"    # paralinguistic only: content slot absent
    L = "L"    # linguistic only: paralinguistic slot absent
    PL = "PL"  # both from speech

    @property
    def fills(self):
        if self is AblationMode.P:
            return SlotFill.FROM_SPEECH, SlotFill.ABSENT
        if self is AblationMode.L:
            return SlotFill.ABSENT, SlotFill.FROM_SPEECH
        return SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH


@dataclass
class EvalReport:
    """Per-sample records plus the summary recomputable from them."""

    mode: str
    suite: str
    samples: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for sample in self.samples:
                fh.write(json.dumps({"sample": sample}, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": self.summary}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        samples, summary = [], {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if "sample" in obj:
                    samples.append(obj["sample"])
                elif "summary" in obj:
                    summary = obj["summary"]
        report = cls(
            mode=summary.get("mode", ""), suite=summary.get("suite", ""),
            samples=samples, summary=summary,
        )
        return report


def summarize_samples(mode: str, suite: str, samples) -> dict:
    """Deterministic fold of per-sample records into the summary block."""
    summary = {"mode": mode, "suite": suite, "count": len(samples)}
    attr_samples = [s for s in samples if s.get("task") == "attribute"]
    if attr_samples:
        per_attribute = {}
        for attribute in sorted({s["attribute"] for s in attr_samples}):
            subset = [s for s in attr_samples if s["attribute"] == attribute]
            predictions = [s["predicted"] for s in subset]
            golds = [s["gold"] for s in subset]
            per_attribute[attribute] = {
                "wa": weighted_accuracy(predictions, golds),
                "balanced_wa": balanced_accuracy(predictions, golds),
                "count": len(subset),
            }
        summary["attributes"] = per_attribute
    asr_samples = [s for s in samples if s.get("task") == "asr"]
    if asr_samples:
        summary["asr"] = {
            "token_error_rate": sum(s["wer"] for s in asr_samples) / len(asr_samples),
            "count": len(asr_samples),
        }
    conv_samples = [s for s in samples if s.get("task") == "conversation"]
    if conv_samples:
        scored_cs = [s["cs"] for s in conv_samples if s.get("cs") is not None]
        scored_egs = [s["egs"] for s in conv_samples if s.get("egs") is not None]
        block = {
            "count": len(conv_samples),
            "cs_scored": len(scored_cs),
            "egs_scored": len(scored_egs),
        }
        if scored_cs:
            block["cs_content"] = sum(v[0] for v in scored_cs) / len(scored_cs)
            block["cs_style"] = sum(v[1] for v in scored_cs) / len(scored_cs)
        if scored_egs:
            for i, name in enumerate(("c1", "c2", "c3", "c4")):
                block[f"egs_{name}"] = sum(v[i] for v in scored_egs) / len(scored_egs)
        summary["conversation"] = block
    return summary


def _generate(bundle, task, fills, max_new_tokens):
    assembled = assembly.build_input(
        task.context, task.instruction, task.record, fills,
        adapters=bundle.adapters, lm=bundle.lm,
    )
    return bundle.lm.generate(assembled, max_new_tokens=max_new_tokens), assembled


def evaluate_attributes(bundle, corpus, mode: AblationMode, seed=0,
                        max_new_tokens=24, limit=None) -> list:
    """Attribute classification over every (record, attribute) pair."""
    rng = np_rng(seed, "eval-attributes", mode.value)
    records = corpus.record_list if limit is None else corpus.record_list[:limit]
    samples = []
    for record in records:
        for attribute in data.ATTRIBUTE_NAMES:
            task = data.build_attribute_sample(record, attribute, corpus.pool, rng)
            response, assembled = _generate(bundle, task, mode.fills, max_new_tokens)
            _check_mode_segments(assembled, mode)
            predicted = parse_choice_response(response, task.choices)
            samples.append(
                {
                    "task": "attribute",
                    "utterance_id": record.utterance_id,
                    "attribute": attribute,
                    "gold": record.attributes.label(attribute),
                    "predicted": predicted,
                    "response": response,
                }
            )
    return samples


def evaluate_asr(bundle, corpus, mode: AblationMode, seed=0,
                 max_new_tokens=24, limit=None) -> list:
    rng = np_rng(seed, "eval-asr", mode.value)
    records = corpus.record_list if limit is None else corpus.record_list[:limit]
    samples = []
    for record in records:
        task = data.build_asr_sample(record, corpus.pool, rng)
        response, assembled = _generate(bundle, task, mode.fills, max_new_tokens)
        _check_mode_segments(assembled, mode)
        samples.append(
            {
                "task": "asr",
                "utterance_id": record.utterance_id,
                "reference": task.target,
                "response": response,
                "wer": wer(task.target, response),
            }
        )
    return samples


def conversation_eval_items(corpus):
    """Test conversations plus their role-reversed variants, truncated at
    the last assistant turn whose preceding user turn carries speech."""
    items = []
    for conv in corpus.conversations:
        for variant in (conv, conv.reversed_roles()):
            candidates = [
                i
                for i in range(1, len(variant.turns))
                if variant.turns[i].speaker == "assistant"
                and variant.turns[i - 1].speaker == "user"
                and variant.turns[i - 1].record is not None
            ]
            if not candidates:
                continue
            t = candidates[-1]
            items.append(
                (variant.conversation_id, list(variant.turns[: t - 1]), variant.turns[t - 1])
            )
    return items


def evaluate_conversations(bundle, corpus, mode: AblationMode, judge, seed=0,
                           max_new_tokens=24, limit=None) -> list:
    rng = np_rng(seed, "eval-conversation", mode.value)
    items = conversation_eval_items(corpus)
    if limit is not None:
        items = items[:limit]
    samples = []
    for conversation_id, context, user_turn in items:
        instruction = corpus.pool.sample("conversation", rng)
        task = data.TaskSample(
            kind=TaskKind.DUAL_INFORMATION,
            instruction=instruction,
            record=user_turn.record,
            target="-",
            context=context,
        )
        response, _ = _generate(bundle, task, mode.fills, max_new_tokens)
        context_text = assembly.render_context(context)
        user_text = f"{user_turn.record.caption}: {user_turn.record.transcript_text}"
        cs = judge_cs(context_text, user_text, response, judge)
        egs = judge_egs(context_text, user_text, response, judge)
        samples.append(
            {
                "task": "conversation",
                "conversation_id": conversation_id,
                "response": response,
                "cs": cs,
                "egs": egs,
            }
        )
    return samples


def _check_mode_segments(assembled, mode: AblationMode):
    para = assembled.segment("para_slot")
    content = assembled.segment("content_slot")
    if mode is AblationMode.P and content is not None:
        raise DomainError("P mode must not carry a content slot")
    if mode is AblationMode.L and para is not None:
        raise DomainError("L mode must not carry a paralinguistic slot")
    if mode is AblationMode.PL and (para is None or content is None):
        raise DomainError("PL mode must carry both slots")


def ablation_eval(bundle, corpus, mode: AblationMode, suite="attributes",
                  judge=None, seed=0, max_new_tokens=24, limit=None) -> EvalReport:
    """Greedy-generate and score one suite under one ablation mode."""
    if suite == "attributes":
        samples = evaluate_attributes(bundle, corpus, mode, seed, max_new_tokens, limit)
    elif suite == "asr":
        samples = evaluate_asr(bundle, corpus, mode, seed, max_new_tokens, limit)
    elif suite == "conversation":
        if judge is None:
            raise DomainError("conversation suite needs a judge endpoint")
        samples = evaluate_conversations(
            bundle, corpus, mode, judge, seed, max_new_tokens, limit
        )
    else:
        raise DomainError(f"unknown suite {suite!r}")
    summary = summarize_samples(mode.value, suite, samples)
    return EvalReport(mode=mode.value, suite=suite, samples=samples, summary=summary)
