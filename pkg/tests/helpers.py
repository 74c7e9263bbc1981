"""Shared construction helpers for the test suite."""

from difs.frontend import AttributeLabelSet, CONTENT_WORDS


def make_attributes(**overrides):
    base = dict(
        gender="female", pitch="high", tempo="fast", energy="low", emotion="happy"
    )
    base.update(overrides)
    return AttributeLabelSet(**base)


def transcript_of(n_words, offset=0):
    return tuple(CONTENT_WORDS[(offset + i) % len(CONTENT_WORDS)] for i in range(n_words))
