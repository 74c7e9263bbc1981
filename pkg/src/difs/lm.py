"""Tokenizer and the small decoder-only language model.

The tokenizer is character-level for ordinary text, with whole-word tokens
for chat control markers, attribute labels, and the synthetic transcript
vocabulary, so classification answers and transcript words are single
tokens. The model is pretrained on text renderings of the tasks and then
frozen; afterwards only the two adapters learn.
"""

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, DomainError, ShapeError
from .frontend import AttributeVocabulary, SYNTH_WORDS
from .rng import derive_seed

UNK = "<unk>"
SYS = "<sys>"
USR = "<usr>"
ASST = "<asst>"
EOT = "<eot>"
PARA = "<para>"
CONTENT = "<content>"
CONTROL_TOKENS = (UNK, SYS, USR, ASST, EOT, PARA, CONTENT)

_CHAR_ALPHABET = "abcdefghijklmnopqrstuvwxyzT .,:;'?!-"


class Tokenizer:
    """Greedy longest-match tokenizer over an ordered vocabulary."""

    def __init__(self, vocab):
        self.vocab = tuple(vocab)
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        if len(self.token_to_id) != len(self.vocab):
            raise DomainError("vocabulary contains duplicates")
        self.unk_id = self.token_to_id[UNK]
        # Multi-character tokens, longest first, grouped by first character.
        self._specials = {}
        for token in sorted(self.vocab, key=lambda t: (-len(t), t)):
            if len(token) > 1:
                self._specials.setdefault(token[0], []).append(token)
        self._encode_cache = {}

    def __len__(self):
        return len(self.vocab)

    def token_id(self, token: str) -> int:
        return self.token_to_id[token]

    def encode(self, text: str):
        cached = self._encode_cache.get(text)
        if cached is not None:
            return list(cached)
        ids = []
        i = 0
        n = len(text)
        while i < n:
            for token in self._specials.get(text[i], ()):
                if text.startswith(token, i):
                    ids.append(self.token_to_id[token])
                    i += len(token)
                    break
            else:
                ids.append(self.token_to_id.get(text[i], self.unk_id))
                i += 1
        if len(text) <= 256:
            self._encode_cache[text] = tuple(ids)
        return ids

    def decode(self, ids) -> str:
        return "".join(self.vocab[i] for i in ids)


def build_tokenizer(attribute_vocab: AttributeVocabulary = None, synth_words=SYNTH_WORDS):
    """Vocabulary order: control tokens, label words, transcript words, characters."""
    attribute_vocab = attribute_vocab or AttributeVocabulary()
    vocab = list(CONTROL_TOKENS)
    vocab.extend(w for w in attribute_vocab.answer_words() if w not in vocab)
    vocab.extend(w for w in synth_words if w not in vocab)
    vocab.extend(c for c in _CHAR_ALPHABET if c not in vocab)
    return Tokenizer(vocab)


@dataclass(frozen=True)
class LanguageModelConfig:
    vocab_size: int
    d_l: int = 32
    n_layers: int = 4
    n_heads: int = 4
    max_context: int = 512

    def __post_init__(self):
        if self.d_l % self.n_heads != 0:
            raise DomainError("d_l must be divisible by n_heads")


class _DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.norm_attn = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.norm_mlp = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x: torch.Tensor, attn_bias: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(self.norm_attn(x)).chunk(3, dim=-1)
        shape = (b, t, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim) + attn_bias
        ctx = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.out_proj(ctx)
        x = x + self.fc2(F.gelu(self.fc1(self.norm_mlp(x))))
        return x

    def forward_cached(self, x: torch.Tensor, attn_bias: torch.Tensor):
        """Unbatched forward (t, d) that returns the attention cache."""
        t, d = x.shape
        q, k, v = self.qkv(self.norm_attn(x)).chunk(3, dim=-1)
        q = q.view(t, self.n_heads, self.head_dim).transpose(0, 1)
        k = k.view(t, self.n_heads, self.head_dim).transpose(0, 1)
        v = v.view(t, self.n_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim) + attn_bias
        ctx = (torch.softmax(scores, dim=-1) @ v).transpose(0, 1).reshape(t, d)
        x = x + self.out_proj(ctx)
        x = x + self.fc2(F.gelu(self.fc1(self.norm_mlp(x))))
        return x, [k, v]

    def step(self, x: torch.Tensor, cache) -> torch.Tensor:
        """One-position forward (1, d) attending over the cached prefix."""
        q, k_new, v_new = self.qkv(self.norm_attn(x)).chunk(3, dim=-1)
        q = q.view(1, self.n_heads, self.head_dim).transpose(0, 1)
        cache[0] = torch.cat(
            [cache[0], k_new.view(1, self.n_heads, self.head_dim).transpose(0, 1)], dim=1
        )
        cache[1] = torch.cat(
            [cache[1], v_new.view(1, self.n_heads, self.head_dim).transpose(0, 1)], dim=1
        )
        scores = q @ cache[0].transpose(-2, -1) / math.sqrt(self.head_dim)
        ctx = (torch.softmax(scores, dim=-1) @ cache[1]).transpose(0, 1).reshape(1, -1)
        x = x + self.out_proj(ctx)
        x = x + self.fc2(F.gelu(self.fc1(self.norm_mlp(x))))
        return x


class TinyCausalLM(nn.Module):
    """Decoder-only transformer with exposed embedding table.

    Inputs may be token ids (embedded internally) or precomputed embedding
    rows, which is how adapter outputs bypass the token embedding lookup.
    """

    def __init__(self, config: LanguageModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_l)
        self.position_embedding = nn.Embedding(config.max_context, config.d_l)
        self.layers = nn.ModuleList(
            _DecoderLayer(config.d_l, config.n_heads) for _ in range(config.n_layers)
        )
        self.norm_out = nn.LayerNorm(config.d_l)
        self.head = nn.Linear(config.d_l, config.vocab_size)
        self._seed_parameters(seed)

    def _seed_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(derive_seed(seed, "lm-init"))
        with torch.no_grad():
            for name, param in self.named_parameters():
                if "norm" in name and name.endswith("weight"):
                    param.fill_(1.0)
                elif name.endswith("bias"):
                    param.zero_()
                else:
                    std = 0.01 if "position_embedding" in name else 0.02
                    values = torch.empty(param.shape).normal_(0.0, std, generator=gen)
                    param.copy_(values)

    def forward_embeddings(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Causal logits for a batch of embedding sequences (b, t, d_l)."""
        b, t, d = embeddings.shape
        if d != self.config.d_l:
            raise ShapeError(f"embedding width {d} != d_l {self.config.d_l}")
        if t > self.config.max_context:
            raise DomainError(f"sequence length {t} exceeds context {self.config.max_context}")
        positions = torch.arange(t, device=embeddings.device)
        x = embeddings + self.position_embedding(positions)[None]
        causal = torch.full((t, t), float("-inf"), device=embeddings.device)
        causal = torch.triu(causal, diagonal=1)[None, None]
        for layer in self.layers:
            x = layer(x, causal)
        return self.head(self.norm_out(x))

    def forward_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.forward_embeddings(self.token_embedding(ids))

    def prefill(self, embeddings: torch.Tensor):
        """Last-position logits plus per-layer caches for greedy decoding."""
        t, d = embeddings.shape
        if d != self.config.d_l:
            raise ShapeError(f"embedding width {d} != d_l {self.config.d_l}")
        if t > self.config.max_context:
            raise DomainError(f"sequence length {t} exceeds context {self.config.max_context}")
        x = embeddings + self.position_embedding(torch.arange(t))
        causal = torch.triu(torch.full((t, t), float("-inf")), diagonal=1)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward_cached(x, causal)
            caches.append(cache)
        return self.head(self.norm_out(x[-1:]))[0], caches

    def decode_step(self, embedding_row: torch.Tensor, caches, position: int):
        if position >= self.config.max_context:
            raise DomainError("decoding past the context window")
        x = embedding_row + self.position_embedding(
            torch.tensor([position], dtype=torch.long)
        )
        for layer, cache in zip(self.layers, caches):
            x = layer.step(x, cache)
        return self.head(self.norm_out(x))[0]


@dataclass
class LanguageModelHandle:
    """Model + tokenizer with an explicit frozen flag.

    Once frozen, no operation mutates parameters; the training loop and
    acceptance tests verify this with bitwise snapshots.
    """

    model: TinyCausalLM
    tokenizer: Tokenizer
    frozen: bool = False

    @property
    def d_l(self) -> int:
        return self.model.config.d_l

    @property
    def eot_id(self) -> int:
        return self.tokenizer.token_id(EOT)

    def freeze(self) -> "LanguageModelHandle":
        self.model.eval()
        for param in self.model.parameters():
            param.requires_grad_(False)
        self.frozen = True
        return self

    def embed_text(self, text: str) -> torch.Tensor:
        """Embedding rows for a text string; empty text gives a 0 x d_l matrix."""
        ids = self.tokenizer.encode(text)
        return self.embed_ids(ids)

    def embed_ids(self, ids) -> torch.Tensor:
        if len(ids) == 0:
            return torch.zeros(0, self.d_l)
        id_tensor = torch.as_tensor(ids, dtype=torch.long)
        if self.frozen:
            with torch.no_grad():
                return self.model.token_embedding(id_tensor)
        return self.model.token_embedding(id_tensor)

    def forward_logits(self, assembled) -> torch.Tensor:
        """Logits (t x vocab) for one assembled input."""
        embeddings = assembled.embeddings
        if embeddings.ndim != 2:
            raise ShapeError("assembled embeddings must be 2-D")
        return self.model.forward_embeddings(embeddings[None])[0]

    def generate(self, assembled, max_new_tokens: int) -> str:
        """Greedy decoding until <eot> or the token budget is exhausted."""
        if max_new_tokens < 1:
            raise DomainError("max_new_tokens must be >= 1")
        embeddings = assembled.embeddings.detach()
        out_ids = []
        with torch.no_grad():
            logits, caches = self.model.prefill(embeddings)
            position = embeddings.shape[0]
            for step in range(max_new_tokens):
                next_id = int(torch.argmax(logits).item())
                if next_id == self.eot_id:
                    break
                out_ids.append(next_id)
                if step + 1 == max_new_tokens or position >= self.model.config.max_context:
                    break
                next_emb = self.model.token_embedding(
                    torch.tensor([next_id], dtype=torch.long)
                )
                logits = self.model.decode_step(next_emb, caches, position)
                position += 1
        return self.tokenizer.decode(out_ids)


def new_language_model(
    tokenizer: Tokenizer, d_l=32, n_layers=4, n_heads=4, max_context=512, seed=0
) -> LanguageModelHandle:
    config = LanguageModelConfig(
        vocab_size=len(tokenizer),
        d_l=d_l,
        n_layers=n_layers,
        n_heads=n_heads,
        max_context=max_context,
    )
    return LanguageModelHandle(TinyCausalLM(config, seed=seed), tokenizer)


def build_optimizer(named_params, lr: float, weight_decay: float):
    """AdamW over the trainable subset; warns when given frozen parameters."""
    trainable, frozen_names = [], []
    for name, param in named_params:
        if param.requires_grad:
            trainable.append(param)
        else:
            frozen_names.append(name)
    if frozen_names:
        warnings.warn(
            f"{len(frozen_names)} frozen parameters excluded from optimization "
            f"(first: {frozen_names[0]})",
            RuntimeWarning,
        )
    if not trainable:
        raise DomainError("no trainable parameters")
    return torch.optim.AdamW(trainable, lr=lr, weight_decay=weight_decay)


@dataclass
class PretrainConfig:
    batch_size: int = 64
    max_steps: int = 4000
    min_steps: int = 600
    eval_interval: int = 200
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_steps: int = 100
    seed: int = 0
    gate_qa_accuracy: float = 0.95
    log: list = field(default_factory=list, repr=False)


def _pad_id_batch(samples, pad_id: int):
    max_len = max(len(s.token_ids) for s in samples)
    ids = torch.full((len(samples), max_len), pad_id, dtype=torch.long)
    mask = torch.zeros(len(samples), max_len, dtype=torch.bool)
    for row, sample in enumerate(samples):
        n = len(sample.token_ids)
        ids[row, :n] = torch.as_tensor(sample.token_ids, dtype=torch.long)
        mask[row, :n] = torch.as_tensor(sample.loss_mask, dtype=torch.bool)
    return ids, mask


def masked_id_loss(logits: torch.Tensor, ids: torch.Tensor, mask: torch.Tensor):
    """Mean over samples of the per-sample mean next-token cross-entropy.

    mask marks target positions; the logits that predict position p live at
    p - 1, so each sample needs mask[0] to be False.
    """
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise DomainError("sample has an empty loss mask")
    if mask[:, 0].any():
        raise DomainError("loss mask covers position 0, which has no predecessor")
    b, t, v = logits.shape
    # Unmasked positions may hold -1 (soft rows); neutralize them before the
    # gather, their term is zeroed by the mask anyway.
    targets = torch.where(mask[:, 1:], ids[:, 1:], torch.zeros_like(ids[:, 1:]))
    ce = F.cross_entropy(
        logits[:, :-1].reshape(-1, v), targets.reshape(-1), reduction="none"
    ).view(b, t - 1)
    ce = ce * mask[:, 1:]
    return (ce.sum(dim=1) / counts).mean()


def pretrain_text_tasks(corpus, config: PretrainConfig, lm: LanguageModelHandle,
                        gate_fn=None) -> LanguageModelHandle:
    """Train the language model on text renderings of the tasks.

    corpus is a list of samples carrying token_ids and loss_mask. Training
    stops at max_steps or, after min_steps, as soon as gate_fn (called every
    eval_interval steps) reports success. Returns the same handle, still
    unfrozen; the caller freezes it before adapter training.
    """
    if not corpus:
        raise DomainError("pretraining corpus is empty")
    if lm.frozen:
        raise ContractError("cannot pretrain a frozen language model")
    optimizer = build_optimizer(lm.model.named_parameters(), config.lr, config.weight_decay)
    pad_id = lm.eot_id
    order = []
    step = 0
    lm.model.train()
    while step < config.max_steps:
        if len(order) < config.batch_size:
            epoch_gen = np.random.default_rng(
                derive_seed(config.seed, "pretrain-epoch", step)
            )
            order.extend(epoch_gen.permutation(len(corpus)).tolist())
        batch_idx = [order.pop() for _ in range(config.batch_size)]
        ids, mask = _pad_id_batch([corpus[i] for i in batch_idx], pad_id)
        torch.manual_seed(derive_seed(config.seed, "pretrain-step", step))
        warm = min(1.0, (step + 1) / max(config.warmup_steps, 1))
        decay = 1.0 - 0.8 * (step / max(config.max_steps, 1))
        for group in optimizer.param_groups:
            group["lr"] = config.lr * warm * decay
        optimizer.zero_grad()
        loss = masked_id_loss(lm.model.forward_ids(ids), ids, mask)
        loss.backward()
        optimizer.step()
        step += 1
        if step % config.eval_interval == 0 or step == config.max_steps:
            entry = {"step": step, "loss": float(loss.item())}
            if gate_fn is not None:
                lm.model.eval()
                entry.update(gate_fn(lm))
                lm.model.train()
            config.log.append(entry)
            if entry.get("gate_passed") and step >= config.min_steps:
                break
    lm.model.eval()
    return lm


def save_language_model(lm: LanguageModelHandle, path):
    header = {
        "config": asdict(lm.model.config),
        "vocab": list(lm.tokenizer.vocab),
        "frozen": lm.frozen,
    }
    arrays = {
        name: param.detach().cpu().numpy()
        for name, param in lm.model.named_parameters()
    }
    np.savez(path, __header__=np.frombuffer(json.dumps(header).encode(), np.uint8), **arrays)


def load_language_model(path) -> LanguageModelHandle:
    data = np.load(path)
    header = json.loads(bytes(data["__header__"]).decode())
    tokenizer = Tokenizer(header["vocab"])
    model = TinyCausalLM(LanguageModelConfig(**header["config"]))
    state = {
        name: torch.as_tensor(data[name]) for name in data.files if name != "__header__"
    }
    model.load_state_dict(state)
    handle = LanguageModelHandle(model, tokenizer)
    if header["frozen"]:
        handle.freeze()
    return handle
