"""Judge-based scoring of conversational responses.

A judge endpoint is anything with complete(system, user) -> str. The
content/style rubric yields two scores on 1-5; the emotional-generation
rubric yields four scores on 0-10 (content relevance, negative emotion
avoidance, positive emotion display, positive impact). Malformed replies
are retried up to the attempt budget and then recorded as unscored (None);
transport failures that survive the retries raise.
"""

import re

from .errors import DomainError, TransportError
from .rng import derive_seed

MAX_ATTEMPTS = 3

CS_SYSTEM_PROMPT = (
    "You are a strict evaluator of conversational replies. Rate the "
    "candidate response on two aspects, each as an integer from 1 to 5:\n"
    "content: how well the response addresses the user's utterance.\n"
    "style: how appropriate the response's style is for the conversation.\n"
    "Answer with exactly two integers separated by a space, nothing else."
)

EGS_SYSTEM_PROMPT = (
    "You are a strict evaluator of emotional conversation. Rate the "
    "candidate response on four aspects, each as an integer from 0 to 10:\n"
    "C1: content relevance.\n"
    "C2: negative emotion avoidance.\n"
    "C3: positive emotion display.\n"
    "C4: positive impact.\n"
    "Answer with exactly four integers separated by spaces, nothing else."
)


def _user_prompt(context, user_text, response):
    return (
        f"conversation so far:\n{context or '(none)'}\n"
        f"user utterance:\n{user_text}\n"
        f"candidate response:\n{response}"
    )


def _parse_scores(text, count, low, high):
    values = [int(v) for v in re.findall(r"-?\d+", text or "")]
    if len(values) != count:
        return None
    if any(v < low or v > high for v in values):
        return None
    return tuple(values)


def _score(context, user_text, response, judge, system_prompt, count, low, high):
    user = _user_prompt(context, user_text, response)
    failures = 0
    for _ in range(MAX_ATTEMPTS):
        try:
            reply = judge.complete(system_prompt, user)
        except TransportError:
            failures += 1
            continue
        parsed = _parse_scores(reply, count, low, high)
        if parsed is not None:
            return parsed
    if failures >= MAX_ATTEMPTS:
        raise TransportError(f"judge unreachable after {MAX_ATTEMPTS} attempts")
    return None  # unscored: malformed output survived the retries


def judge_cs(context, user_text, response, judge):
    """(content, style) on 1-5, or None when unscored."""
    return _score(context, user_text, response, judge, CS_SYSTEM_PROMPT, 2, 1, 5)


def judge_egs(context, user_text, response, judge):
    """(C1, C2, C3, C4) on 0-10, or None when unscored."""
    return _score(context, user_text, response, judge, EGS_SYSTEM_PROMPT, 4, 0, 10)


class MockJudge:
    """Deterministic in-process judge for tests and offline runs.

    Scores are a pure function of the prompt text, so identical inputs get
    identical scores.
    """

    def __init__(self, fixed_reply=None):
        self.fixed_reply = fixed_reply
        self.calls = 0

    def complete(self, system, user):
        self.calls += 1
        if self.fixed_reply is not None:
            return self.fixed_reply
        digest = derive_seed(system, user)
        if "1 to 5" in system:
            return f"{3 + digest % 3} {3 + (digest // 3) % 3}"
        return " ".join(str(5 + (digest // (7 ** i)) % 6) for i in range(4))


class HttpJudge:
    """POSTs {system, user} as JSON and expects {"text": ...} back."""

    def __init__(self, url, timeout=30.0):
        self.url = url
        self.timeout = timeout

    def complete(self, system, user):
        import requests

        try:
            response = requests.post(
                self.url, json={"system": system, "user": user}, timeout=self.timeout
            )
            response.raise_for_status()
            payload = response.json()
        except requests.RequestException as exc:
            raise TransportError(f"judge request failed: {exc}") from exc
        if "text" not in payload:
            raise TransportError("judge reply missing 'text' field")
        return payload["text"]


def make_judge(spec: str):
    """'mock' or an http(s) URL."""
    if spec == "mock":
        return MockJudge()
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpJudge(spec)
    raise DomainError(f"unknown judge spec {spec!r}")
