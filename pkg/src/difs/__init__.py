"""Dual-adapter speech-language modeling at desk scale.

A frozen speech frontend and a frozen text language model are bridged by
two small adapters: a paralinguistic adapter emitting a fixed number of
soft-prompt embeddings and a linguistic adapter replacing the content text
embeddings. Training is a three-stage schedule with equivalence-replacement
regularization; evaluation covers transcription error, attribute accuracy
under embedding ablations, and judge-scored conversation quality.
"""

from .adapters import (
    LinguisticAdapter,
    LinguisticAdapterConfig,
    ParalinguisticAdapter,
    ParalinguisticAdapterConfig,
    adapter_parameters,
    stack_frames,
)
from .assembly import AssembledInput, SlotFill, TaskKind, Turn, build_input, \
    sample_err_fills, truncate_context
from .evaluation import AblationMode, EvalReport, ablation_eval, \
    parse_choice_response, weighted_accuracy, wer
from .frontend import (
    AttributeLabelSet,
    AttributeVocabulary,
    SpeechFeatureSequence,
    SyntheticFrontend,
    UtteranceRecord,
    caption_of,
    encode,
)
from .lm import LanguageModelHandle, Tokenizer, build_tokenizer, \
    new_language_model, pretrain_text_tasks
from .training import ModelBundle, StageConfig, lr_at, mixture_sampler, \
    next_token_loss, run_stage

__all__ = [
    "AblationMode",
    "AssembledInput",
    "AttributeLabelSet",
    "AttributeVocabulary",
    "EvalReport",
    "LanguageModelHandle",
    "LinguisticAdapter",
    "LinguisticAdapterConfig",
    "ModelBundle",
    "ParalinguisticAdapter",
    "ParalinguisticAdapterConfig",
    "SlotFill",
    "SpeechFeatureSequence",
    "StageConfig",
    "SyntheticFrontend",
    "TaskKind",
    "Tokenizer",
    "Turn",
    "UtteranceRecord",
    "ablation_eval",
    "adapter_parameters",
    "build_input",
    "build_tokenizer",
    "caption_of",
    "encode",
    "lr_at",
    "mixture_sampler",
    "new_language_model",
    "next_token_loss",
    "parse_choice_response",
    "pretrain_text_tasks",
    "run_stage",
    "sample_err_fills",
    "stack_frames",
    "truncate_context",
    "weighted_accuracy",
    "wer",
]

__version__ = "0.1.0"
