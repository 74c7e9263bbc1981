"""Speech frontend: feature sequences, the synthetic utterance generator,
speaker-attribute captions, and the on-disk feature-file format.

The synthetic generator builds utterances whose linguistic factor (which
words were spoken) and paralinguistic factors (speaker attributes) are
separable by construction: each word contributes a fixed 4-frame pattern,
while the attribute combination contributes a single offset vector added
to every frame.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ValidationError, VocabularyError
from .rng import derive_seed, np_rng

ATTRIBUTE_NAMES = ("gender", "pitch", "tempo", "energy", "emotion")

DEFAULT_ATTRIBUTE_VOCAB = {
    "gender": ("female", "male"),
    "pitch": ("low", "medium", "high"),
    "tempo": ("slow", "medium", "fast"),
    "energy": ("low", "medium", "high"),
    "emotion": ("neutral", "happy", "sad", "angry", "surprised"),
}

CAPTION_TEMPLATE = (
    "a {gender} speaker, {pitch} pitch, {tempo} tempo, "
    "{energy} energy, {emotion} emotion"
)

# Two-letter consonant-vowel words; none collides with an attribute label.
_CONSONANTS = "bdfgjk"
_VOWELS = "aeiou"
SYNTH_WORDS = tuple(c + v for c in _CONSONANTS for v in _VOWELS)  # 30 words

# Words reserved for scripted conversational replies; the remaining 25 are
# the content vocabulary used for transcripts.
MOOD_WORDS = SYNTH_WORDS[:5]
CONTENT_WORDS = SYNTH_WORDS[5:]

FRAMES_PER_TOKEN = 4
DEFAULT_NOISE_SIGMA = 0.05
DEFAULT_FRAME_RATE_HZ = 50.0

FEATURE_FILE_MAGIC = "DIFS-FEAT"
FEATURE_FILE_VERSION = "v1"


class AttributeVocabulary:
    """Closed label vocabularies for the five speaker attributes."""

    def __init__(self, vocab=None):
        vocab = dict(DEFAULT_ATTRIBUTE_VOCAB if vocab is None else vocab)
        missing = [a for a in ATTRIBUTE_NAMES if a not in vocab]
        if missing:
            raise DomainError(f"attribute vocabulary missing {missing}")
        self._vocab = {a: tuple(vocab[a]) for a in ATTRIBUTE_NAMES}
        for attr, labels in self._vocab.items():
            if len(labels) < 2 or len(set(labels)) != len(labels):
                raise DomainError(f"attribute {attr!r} needs >= 2 distinct labels")

    def labels(self, attribute: str):
        if attribute not in self._vocab:
            raise DomainError(f"unknown attribute {attribute!r}")
        return self._vocab[attribute]

    @property
    def attributes(self):
        return ATTRIBUTE_NAMES

    def answer_words(self):
        """All distinct label words, in attribute-then-label order."""
        seen = []
        for attr in ATTRIBUTE_NAMES:
            for label in self._vocab[attr]:
                if label not in seen:
                    seen.append(label)
        return tuple(seen)

    def check(self, attribute: str, label: str):
        if label not in self.labels(attribute):
            raise VocabularyError(
                f"label {label!r} not in vocabulary for attribute {attribute!r}"
            )

    def combinations(self):
        """Every label combination, in deterministic order."""
        combos = [{}]
        for attr in ATTRIBUTE_NAMES:
            combos = [dict(c, **{attr: l}) for c in combos for l in self._vocab[attr]]
        return [AttributeLabelSet(**c, vocabulary=self) for c in combos]


@dataclass(frozen=True)
class AttributeLabelSet:
    """One label per speaker attribute, validated against a vocabulary."""

    gender: str
    pitch: str
    tempo: str
    energy: str
    emotion: str
    vocabulary: AttributeVocabulary = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self):
        vocab = self.vocabulary or AttributeVocabulary()
        object.__setattr__(self, "vocabulary", vocab)
        for attr in ATTRIBUTE_NAMES:
            vocab.check(attr, getattr(self, attr))

    def label(self, attribute: str) -> str:
        if attribute not in ATTRIBUTE_NAMES:
            raise DomainError(f"unknown attribute {attribute!r}")
        return getattr(self, attribute)

    def as_dict(self):
        return {a: getattr(self, a) for a in ATTRIBUTE_NAMES}


def caption_of(attributes: AttributeLabelSet) -> str:
    """Render the fixed caption template; injective over label combinations."""
    return CAPTION_TEMPLATE.format(**attributes.as_dict())


@dataclass
class SpeechFeatureSequence:
    """Frame matrix (n_s x d_s) emitted by a speech frontend."""

    frames: np.ndarray
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DomainError(f"frames must be 2-D, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DomainError("feature sequence needs at least one frame")
        if not np.isfinite(self.frames).all():
            raise DomainError("feature frames must be finite")
        if self.frame_rate_hz <= 0:
            raise DomainError("frame_rate_hz must be positive")

    @property
    def n_s(self) -> int:
        return self.frames.shape[0]

    @property
    def d_s(self) -> int:
        return self.frames.shape[1]


@dataclass
class UtteranceRecord:
    """One utterance: features, transcript words, attributes, caption."""

    utterance_id: str
    features: SpeechFeatureSequence
    transcript: tuple
    attributes: AttributeLabelSet
    caption: str = None

    def __post_init__(self):
        self.transcript = tuple(self.transcript)
        if not self.transcript:
            raise ValidationError("transcript must be non-empty", field="transcript")
        expected = caption_of(self.attributes)
        if self.caption is None:
            self.caption = expected
        elif self.caption != expected:
            raise ValidationError(
                "caption must equal caption_of(attributes)", field="caption"
            )

    @property
    def transcript_text(self) -> str:
        return " ".join(self.transcript)

    @property
    def transcript_dense(self) -> str:
        """Separator-free rendering used for the content-slot text fill.

        Transcript words are single tokens, so the content slot carries one
        row per word: the same granularity class as the stacked speech rows,
        which keeps the frozen model's content reading transferable between
        the two fills.
        """
        return "".join(self.transcript)


class SyntheticFrontend:
    """Deterministic stand-in for a real speech encoder.

    Word and attribute bases are drawn once from a seeded generator and can
    be persisted alongside a corpus, so every experiment that shares the
    bases file sees the same feature space.
    """

    def __init__(
        self,
        d_s: int = 16,
        vocab=SYNTH_WORDS,
        attribute_vocab: AttributeVocabulary = None,
        seed: int = 0,
        noise_sigma: float = DEFAULT_NOISE_SIGMA,
    ):
        self.d_s = int(d_s)
        self.vocab = tuple(vocab)
        self.attribute_vocab = attribute_vocab or AttributeVocabulary()
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        gen = np_rng(seed, "frontend-bases")
        self.token_bases = {
            w: gen.standard_normal((FRAMES_PER_TOKEN, self.d_s)) for w in self.vocab
        }
        self.attribute_bases = {
            attr: {
                label: gen.standard_normal(self.d_s)
                for label in self.attribute_vocab.labels(attr)
            }
            for attr in ATTRIBUTE_NAMES
        }

    def attribute_offset(self, attributes: AttributeLabelSet) -> np.ndarray:
        """Constant per-frame offset for an attribute combination."""
        offset = np.zeros(self.d_s)
        for attr in ATTRIBUTE_NAMES:
            offset += self.attribute_bases[attr][attributes.label(attr)]
        return offset

    def synth_utterance(
        self,
        attributes: AttributeLabelSet,
        transcript,
        seed: int,
        utterance_id: str = None,
    ) -> UtteranceRecord:
        """Generate an utterance; deterministic for fixed arguments.

        Noise depends only on (seed, transcript length), so two calls that
        differ in a single attribute differ exactly by a constant row
        offset: the difference of the two attribute basis vectors.
        """
        transcript = tuple(transcript)
        if not transcript:
            raise DomainError("transcript must contain at least one token")
        for word in transcript:
            if word not in self.token_bases:
                raise VocabularyError(f"token {word!r} not in synthetic vocabulary")
        n_s = FRAMES_PER_TOKEN * len(transcript)
        frames = np.concatenate([self.token_bases[w] for w in transcript], axis=0)
        frames = frames + self.attribute_offset(attributes)[None, :]
        noise_gen = np_rng(self.seed, "utterance-noise", int(seed))
        frames = frames + self.noise_sigma * noise_gen.standard_normal((n_s, self.d_s))
        if utterance_id is None:
            utterance_id = f"utt-{int(seed):08d}"
        return UtteranceRecord(
            utterance_id=utterance_id,
            features=SpeechFeatureSequence(frames),
            transcript=transcript,
            attributes=attributes,
        )

    def save_bases(self, path):
        arrays = {f"token::{w}": b for w, b in self.token_bases.items()}
        for attr, by_label in self.attribute_bases.items():
            for label, vec in by_label.items():
                arrays[f"attr::{attr}::{label}"] = vec
        np.savez(
            path,
            __meta__=np.array(
                [self.d_s, self.seed, int(self.noise_sigma * 1e9)], dtype=np.int64
            ),
            **arrays,
        )

    @classmethod
    def load_bases(cls, path, attribute_vocab: AttributeVocabulary = None):
        data = np.load(path)
        d_s, seed, sigma_ns = (int(v) for v in data["__meta__"])
        frontend = cls(
            d_s=d_s,
            attribute_vocab=attribute_vocab,
            seed=seed,
            noise_sigma=sigma_ns / 1e9,
        )
        for key in data.files:
            if key.startswith("token::"):
                frontend.token_bases[key.split("::", 1)[1]] = data[key]
            elif key.startswith("attr::"):
                _, attr, label = key.split("::")
                frontend.attribute_bases[attr][label] = data[key]
        return frontend


def derive_utterance_seed(corpus_seed: int, utterance_id: str) -> int:
    return derive_seed(corpus_seed, "utterance", utterance_id)


def write_feature_file(path, features: SpeechFeatureSequence):
    """Write the text feature format: header line, then one row per frame.

    Floats are rendered with %.17g so float64 values round-trip exactly.
    """
    frames = features.frames
    with open(path, "w", encoding="ascii") as fh:
        fh.write(
            f"{FEATURE_FILE_MAGIC} {FEATURE_FILE_VERSION} "
            f"{frames.shape[0]} {frames.shape[1]}\n"
        )
        for row in frames:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")


def read_feature_file(path) -> SpeechFeatureSequence:
    path = os.fspath(path)
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != FEATURE_FILE_MAGIC:
            raise FormatError(f"{path}: not a {FEATURE_FILE_MAGIC} file")
        if header[1] != FEATURE_FILE_VERSION:
            raise FormatError(f"{path}: unsupported version {header[1]!r}")
        try:
            n_s, d_s = int(header[2]), int(header[3])
        except ValueError as exc:
            raise FormatError(f"{path}: bad header counts") from exc
        if n_s < 1:
            raise DomainError(f"{path}: empty feature payload (n_s={n_s})")
        rows = np.empty((n_s, d_s), dtype=np.float64)
        for i in range(n_s):
            parts = fh.readline().split()
            if len(parts) != d_s:
                raise FormatError(
                    f"{path}: row {i} has {len(parts)} values, expected {d_s}"
                )
            rows[i] = [float(p) for p in parts]
    return SpeechFeatureSequence(rows)


def encode(payload, expected_d_s: int = None) -> SpeechFeatureSequence:
    """Turn an opaque utterance payload into a feature sequence.

    Accepts a precomputed frame matrix (synthetic passthrough), an existing
    SpeechFeatureSequence, or a path to a feature file. Deterministic for a
    fixed payload.
    """
    if isinstance(payload, SpeechFeatureSequence):
        seq = payload
    elif isinstance(payload, np.ndarray):
        arr = payload
        if arr.size == 0:
            raise DomainError("empty feature payload")
        seq = SpeechFeatureSequence(arr)
    elif isinstance(payload, (str, Path)):
        seq = read_feature_file(payload)
    else:
        raise FormatError(f"unknown payload type {type(payload).__name__}")
    if expected_d_s is not None and seq.d_s != expected_d_s:
        raise FormatError(f"expected d_s={expected_d_s}, payload has d_s={seq.d_s}")
    return seq
