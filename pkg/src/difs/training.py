"""Three-stage adapter training over the frozen language model.

Stage 1 trains both adapters jointly on transcription and attribute tasks.
Stage 2 runs two sub-phases with equivalence replacement enabled: 2a trains
the linguistic adapter alone, 2b the paralinguistic adapter alone. Stage 3
fine-tunes both on conversational dual-information tasks constrained by a
portion of the other two families. Only the adapters ever receive
gradients; freeze violations are hard failures.
"""

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

from . import assembly, data
from .assembly import SlotFill, TaskKind
from .errors import ContractError, DomainError
from .lm import LanguageModelHandle, build_optimizer
from .lm import masked_id_loss as lm_masked_loss
from .rng import derive_seed, np_rng

STAGE_NAMES = ("1", "2a", "2b", "3")

ADAPTER_NAMES = ("para_adapter", "ling_adapter")

_STAGE_LEARNABLE = {
    "1": frozenset(ADAPTER_NAMES),
    "2a": frozenset({"ling_adapter"}),
    "2b": frozenset({"para_adapter"}),
    "3": frozenset(ADAPTER_NAMES),
}

_DEFAULT_MIXTURES = {
    "1": {TaskKind.LINGUISTIC: 0.5, TaskKind.PARALINGUISTIC: 0.5},
    "2a": {TaskKind.LINGUISTIC: 1.0},
    "2b": {TaskKind.PARALINGUISTIC: 1.0},
    "3": {
        TaskKind.DUAL_INFORMATION: 0.7,
        TaskKind.LINGUISTIC: 0.15,
        TaskKind.PARALINGUISTIC: 0.15,
    },
}


@dataclass
class StageConfig:
    """Per-stage schedule; defaults carry the full-scale values."""

    stage: str
    learnable: frozenset = None
    task_mixture: dict = None
    err_enabled: bool = None
    max_lr: float = None
    warmup_steps: int = None
    epochs: int = 3
    batch_size: int = 48
    weight_decay: float = 0.05
    seed: int = 0
    steps_per_epoch: int = 100
    n_val_samples: int = 96
    alignment_pool_size: int = 512
    max_new_tokens: int = 24

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise DomainError(f"unknown stage {self.stage!r}")
        expected_learnable = _STAGE_LEARNABLE[self.stage]
        if self.learnable is None:
            self.learnable = expected_learnable
        self.learnable = frozenset(self.learnable)
        if self.learnable != expected_learnable:
            raise DomainError(
                f"stage {self.stage} learnable set must be {sorted(expected_learnable)}"
            )
        if self.task_mixture is None:
            self.task_mixture = dict(_DEFAULT_MIXTURES[self.stage])
        self._check_mixture()
        expected_err = self.stage in ("2a", "2b")
        if self.err_enabled is None:
            self.err_enabled = expected_err
        if self.err_enabled != expected_err:
            raise DomainError(
                f"stage {self.stage} requires err_enabled={expected_err}"
            )
        if self.max_lr is None:
            self.max_lr = 5e-5 if self.stage == "1" else 5e-6
        if self.warmup_steps is None:
            self.warmup_steps = 0 if self.stage == "3" else 1000
        if self.warmup_steps < 0 or self.epochs < 1 or self.batch_size < 1:
            raise DomainError("schedule values must be positive")

    def _check_mixture(self):
        allowed = {
            "1": {TaskKind.LINGUISTIC, TaskKind.PARALINGUISTIC},
            "2a": {TaskKind.LINGUISTIC},
            "2b": {TaskKind.PARALINGUISTIC},
            "3": set(TaskKind),
        }[self.stage]
        for kind, proportion in self.task_mixture.items():
            if kind not in allowed:
                raise DomainError(f"stage {self.stage} cannot mix task kind {kind}")
            if proportion < 0:
                raise DomainError("mixture proportions must be non-negative")
        if abs(sum(self.task_mixture.values()) - 1.0) > 1e-9:
            raise DomainError("mixture proportions must sum to 1")
        if self.stage == "3" and self.task_mixture.get(TaskKind.DUAL_INFORMATION, 0) <= 0:
            raise DomainError("stage 3 mixture must include dual-information tasks")

    @property
    def stage_number(self) -> int:
        return int(self.stage[0])


@dataclass
class ModelBundle:
    para_adapter: torch.nn.Module
    ling_adapter: torch.nn.Module
    lm: LanguageModelHandle

    def adapter(self, name: str) -> torch.nn.Module:
        if name == "para_adapter":
            return self.para_adapter
        if name == "ling_adapter":
            return self.ling_adapter
        raise DomainError(f"unknown adapter {name!r}")

    @property
    def adapters(self):
        return self.para_adapter, self.ling_adapter


def lr_at(step: int, cfg: StageConfig, total_steps: int) -> float:
    """Linear warmup to max_lr, then linear decay to zero at total_steps."""
    if total_steps < 1:
        raise DomainError("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    warmup = min(cfg.warmup_steps, total_steps)
    if warmup > 0 and step <= warmup:
        return cfg.max_lr * step / warmup
    return cfg.max_lr * (total_steps - step) / (total_steps - warmup)


def mixture_sampler(task_mixture: dict, rng: np.random.Generator):
    """Infinite i.i.d. stream of task kinds with the given proportions."""
    kinds = list(task_mixture)
    probs = np.array([task_mixture[k] for k in kinds], dtype=np.float64)
    if (probs < 0).any():
        raise DomainError("mixture proportions must be non-negative")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise DomainError("mixture proportions must sum to 1")
    while True:
        yield kinds[int(rng.choice(len(kinds), p=probs))]


def next_token_loss(logits: torch.Tensor, assembled) -> torch.Tensor:
    """Mean cross-entropy over masked response positions.

    The token at a masked position p is predicted by the logits at p - 1.
    """
    positions = [i for i, m in enumerate(assembled.loss_mask) if m]
    if not positions:
        raise DomainError("assembled input has an empty loss mask")
    if positions[0] == 0:
        raise DomainError("loss mask covers position 0, which has no predecessor")
    idx = torch.as_tensor(positions, dtype=torch.long)
    targets = torch.as_tensor(
        [assembled.token_ids[p] for p in positions], dtype=torch.long
    )
    return F.cross_entropy(logits[idx - 1], targets)


def batch_loss(lm: LanguageModelHandle, assembled_list) -> torch.Tensor:
    """Mean over samples of per-sample next-token loss, via one padded forward."""
    embeddings = pad_sequence([a.embeddings for a in assembled_list], batch_first=True)
    logits = lm.model.forward_embeddings(embeddings)
    b, t = len(assembled_list), embeddings.shape[1]
    ids = torch.zeros(b, t, dtype=torch.long)
    mask = torch.zeros(b, t, dtype=torch.bool)
    for row, assembled in enumerate(assembled_list):
        n = len(assembled.token_ids)
        ids[row, :n] = torch.as_tensor(assembled.token_ids, dtype=torch.long)
        mask[row, :n] = torch.as_tensor(assembled.loss_mask, dtype=torch.bool)
    return lm_masked_loss(logits, ids, mask)


def parameter_bytes(module: torch.nn.Module) -> dict:
    """Bitwise snapshot used to assert freeze laws."""
    return {
        name: param.detach().cpu().numpy().tobytes()
        for name, param in module.named_parameters()
    }


def assert_unchanged(module: torch.nn.Module, snapshot: dict, what: str):
    current = parameter_bytes(module)
    if current.keys() != snapshot.keys():
        raise ContractError(f"freeze violation: {what} parameter set changed")
    for name in snapshot:
        if current[name] != snapshot[name]:
            raise ContractError(f"freeze violation: {what} parameter {name} changed")


@dataclass
class StageResult:
    stage: str
    best_val_loss: float
    best_state: dict
    last_state: dict
    log: list = field(default_factory=list)
    context_lengths: set = field(default_factory=set)
    para_slot_starts: set = field(default_factory=set)


class _SampleFactory:
    """Draws task samples for a stage from one seeded stream."""

    def __init__(self, cfg: StageConfig, corpus: data.Corpus, bundle: ModelBundle,
                 purpose: str, pool_size: int = None):
        self.cfg = cfg
        self.corpus = corpus
        self.bundle = bundle
        self.rng = np_rng(cfg.seed, "stage", cfg.stage, purpose)
        self.records = corpus.record_list
        self.alignment_pool = []
        if cfg.task_mixture.get(TaskKind.DUAL_INFORMATION, 0) > 0:
            if not corpus.conversations:
                raise DomainError("stage mixture needs conversations but corpus has none")
            pool_rng = np_rng(cfg.seed, "stage", cfg.stage, purpose, "alignment")
            for _ in range(pool_size or cfg.alignment_pool_size):
                conv = corpus.conversations[
                    int(pool_rng.integers(len(corpus.conversations)))
                ]
                self.alignment_pool.append(
                    data.build_alignment_sample(
                        conv, pool_rng, bundle.lm, corpus.pool,
                        max_new_tokens=cfg.max_new_tokens,
                    )
                )

    def draw(self, kind: TaskKind) -> data.TaskSample:
        if kind is TaskKind.DUAL_INFORMATION:
            return self.alignment_pool[int(self.rng.integers(len(self.alignment_pool)))]
        record = self.records[int(self.rng.integers(len(self.records)))]
        if kind is TaskKind.PARALINGUISTIC:
            attribute = data.ATTRIBUTE_NAMES[
                int(self.rng.integers(len(data.ATTRIBUTE_NAMES)))
            ]
            return data.build_attribute_sample(record, attribute, self.corpus.pool, self.rng)
        return data.build_asr_sample(record, self.corpus.pool, self.rng)


def _assemble(task, fills, bundle: ModelBundle, target=True):
    return assembly.build_input(
        task.context,
        task.instruction,
        task.record,
        fills,
        adapters=bundle.adapters,
        lm=bundle.lm,
        target=task.target if target else None,
    )


def validation_loss(cfg: StageConfig, bundle: ModelBundle, val_samples) -> float:
    bundle.para_adapter.eval()
    bundle.ling_adapter.eval()
    speech = (SlotFill.FROM_SPEECH, SlotFill.FROM_SPEECH)
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(val_samples), cfg.batch_size):
            chunk = val_samples[start : start + cfg.batch_size]
            assembled = [_assemble(task, speech, bundle) for task in chunk]
            total += float(batch_loss(bundle.lm, assembled).item()) * len(chunk)
    return total / len(val_samples)


def build_validation_samples(cfg: StageConfig, corpus: data.Corpus, bundle: ModelBundle):
    factory = _SampleFactory(
        cfg, corpus, bundle, purpose="validation", pool_size=cfg.n_val_samples
    )
    if cfg.stage == "3":
        # Stage 3 selects on dual-information validation loss only.
        kinds = itertools.repeat(TaskKind.DUAL_INFORMATION)
    else:
        kinds = mixture_sampler(cfg.task_mixture, factory.rng)
    return [factory.draw(next(kinds)) for _ in range(cfg.n_val_samples)]


def run_stage(
    cfg: StageConfig,
    bundle: ModelBundle,
    train_corpus: data.Corpus,
    val_corpus: data.Corpus,
) -> StageResult:
    """Train one stage and return the best-validation snapshot.

    Raises ContractError if the language model is not frozen beforehand or
    if any non-learnable parameter changes during the stage.
    """
    if not bundle.lm.frozen:
        raise ContractError("language model must be frozen before adapter training")

    frozen_watch = {"language model": (bundle.lm.model, parameter_bytes(bundle.lm.model))}
    for name in ADAPTER_NAMES:
        adapter = bundle.adapter(name)
        learnable = name in cfg.learnable
        for param in adapter.parameters():
            param.requires_grad_(learnable)
        if learnable:
            adapter.train()
        else:
            adapter.eval()
            frozen_watch[name] = (adapter, parameter_bytes(adapter))

    trainable_named = [
        (f"{name}.{pname}", p)
        for name in sorted(cfg.learnable)
        for pname, p in bundle.adapter(name).named_parameters()
    ]
    optimizer = build_optimizer(trainable_named, lr=cfg.max_lr, weight_decay=cfg.weight_decay)

    factory = _SampleFactory(cfg, train_corpus, bundle, purpose="train")
    kinds = mixture_sampler(cfg.task_mixture, factory.rng)
    val_samples = build_validation_samples(cfg, val_corpus, bundle)

    total_steps = cfg.epochs * cfg.steps_per_epoch
    result = StageResult(cfg.stage, float("inf"), None, None)
    step = 0
    for epoch in range(cfg.epochs):
        for name in cfg.learnable:
            bundle.adapter(name).train()
        for _ in range(cfg.steps_per_epoch):
            lr = lr_at(step, cfg, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            tasks = [factory.draw(next(kinds)) for _ in range(cfg.batch_size)]
            fills = [
                assembly.sample_err_fills(t.kind, cfg.stage_number, factory.rng)
                for t in tasks
            ]
            torch.manual_seed(derive_seed(cfg.seed, "stage-step", cfg.stage, step))
            assembled = [
                _assemble(task, fill, bundle) for task, fill in zip(tasks, fills)
            ]
            for item in assembled:
                result.context_lengths.add(item.segment_length("context"))
                para_seg = item.segment("para_slot")
                if para_seg is not None:
                    result.para_slot_starts.add(para_seg.start)
                response = item.segment("response")
                for pos, masked in enumerate(item.loss_mask):
                    if masked and not (
                        response.start <= pos < response.start + response.length
                    ):
                        raise ContractError("loss mask covers a non-response segment")
            optimizer.zero_grad()
            loss = batch_loss(bundle.lm, assembled)
            loss.backward()
            optimizer.step()
            result.log.append(
                {"stage": cfg.stage, "step": step, "lr": lr, "loss": float(loss.item())}
            )
            step += 1
        val_loss = validation_loss(cfg, bundle, val_samples)
        result.log.append({"stage": cfg.stage, "epoch": epoch, "val_loss": val_loss})
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_state = {
                name: copy.deepcopy(bundle.adapter(name).state_dict())
                for name in ADAPTER_NAMES
            }

    result.last_state = {
        name: copy.deepcopy(bundle.adapter(name).state_dict()) for name in ADAPTER_NAMES
    }
    result.log.append(
        {
            "stage": cfg.stage,
            "context_lengths": sorted(result.context_lengths),
            "para_slot_starts": sorted(result.para_slot_starts),
            "best_val_loss": result.best_val_loss,
        }
    )
    for what, (module, snapshot) in frozen_watch.items():
        assert_unchanged(module, snapshot, what)
    if result.best_state is not None:
        for name in ADAPTER_NAMES:
            bundle.adapter(name).load_state_dict(result.best_state[name])
    bundle.para_adapter.eval()
    bundle.ling_adapter.eval()
    return result
