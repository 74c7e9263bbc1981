"""The two heterogeneous adapters.

The paralinguistic adapter runs a compact transformer over the frame
sequence, adaptively average-pools it to a fixed number of rows, and
projects into the language model's embedding space. The linguistic adapter
stacks every k adjacent frames into one wide row and applies a two-layer
MLP row-wise. These are the only learnable modules in the system.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainError, ShapeError
from .frontend import SpeechFeatureSequence
from .rng import derive_seed


@dataclass(frozen=True)
class ParalinguisticAdapterConfig:
    n_layers: int = 1
    n_heads: int = 8
    dropout: float = 0.1
    n_a: int = 10
    d_s: int = 16
    d_l: int = 32

    def __post_init__(self):
        if self.n_a < 1:
            raise DomainError("n_a must be >= 1")
        if self.n_layers < 1:
            raise DomainError("n_layers must be >= 1")
        if self.d_s % self.n_heads != 0:
            raise DomainError(f"d_s={self.d_s} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class LinguisticAdapterConfig:
    k: int = 5
    d_h: int = 64  # 2048 at full scale
    d_s: int = 16
    d_l: int = 32

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be >= 1")
        if self.d_h < 1:
            raise DomainError("d_h must be >= 1")


def _as_frame_tensor(features, d_s: int, dtype) -> torch.Tensor:
    if isinstance(features, SpeechFeatureSequence):
        frames = features.frames
    else:
        frames = features
    x = torch.as_tensor(np.asarray(frames), dtype=dtype)
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D frames, got shape {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise DomainError("feature sequence needs at least one frame")
    if x.shape[1] != d_s:
        raise ShapeError(f"expected d_s={d_s}, got {x.shape[1]}")
    return x


def pool_segments(n_s: int, n_a: int):
    """Segment boundaries for adaptive average pooling to n_a rows.

    Segment s averages input rows [floor(s*n_s/n_a), floor((s+1)*n_s/n_a)),
    widened to at least one row so that short inputs (n_s < n_a) repeat
    single rows instead of producing empty segments.
    """
    segments = []
    for s in range(n_a):
        start = (s * n_s) // n_a
        end = max(start + 1, ((s + 1) * n_s) // n_a)
        segments.append((start, end))
    return segments


def adaptive_pool_matrix(n_s: int, n_a: int, dtype=torch.float32) -> torch.Tensor:
    """(n_a x n_s) averaging matrix implementing pool_segments."""
    m = torch.zeros(n_a, n_s, dtype=dtype)
    for s, (start, end) in enumerate(pool_segments(n_s, n_a)):
        m[s, start:end] = 1.0 / (end - start)
    return m


def stack_frames(features, k: int, d_s: int = None) -> torch.Tensor:
    """Concatenate every k adjacent frames into one row.

    Output row i is frames[i*k : i*k + k] flattened; the trailing
    n_s mod k frames are dropped. Raises when n_s < k: an utterance with
    no full window has no linguistic representation.
    """
    if isinstance(features, SpeechFeatureSequence):
        frames = features.frames
    else:
        frames = features
    x = (
        frames
        if isinstance(frames, torch.Tensor)
        else torch.as_tensor(np.asarray(frames))
    )
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D frames, got shape {tuple(x.shape)}")
    if d_s is not None and x.shape[1] != d_s:
        raise ShapeError(f"expected d_s={d_s}, got {x.shape[1]}")
    n_s, width = x.shape
    if k < 1:
        raise DomainError("k must be >= 1")
    if n_s < k:
        raise DomainError(f"n_s={n_s} < k={k}: no full window to stack")
    n_rows = n_s // k
    return x[: n_rows * k].reshape(n_rows, width * k)


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal position table (n x dim)."""
    position = torch.arange(n, dtype=dtype).unsqueeze(1)
    half = (dim + 1) // 2
    div = torch.exp(
        torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half, 1))
    )
    table = torch.zeros(n, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(position * div[: table[:, 0::2].shape[1]])
    table[:, 1::2] = torch.cos(position * div[: table[:, 1::2].shape[1]])
    return table


class _SelfAttentionLayer(nn.Module):
    """Pre-norm encoder layer: self-attention + dropout, then a small MLP.

    Positional information enters through the attention queries and keys
    only, keeping the residual stream equal to the raw frames when the
    output projections are zeroed.
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.norm_attn = nn.LayerNorm(d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.norm_mlp = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        h = self.norm_attn(x)
        q = self.q_proj(h + pos).view(n, self.n_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(h + pos).view(n, self.n_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(h).view(n, self.n_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(0, 1).reshape(n, d)
        x = x + self.dropout(self.out_proj(ctx))
        x = x + self.dropout(self.fc2(F.gelu(self.fc1(self.norm_mlp(x)))))
        return x


class ParalinguisticAdapter(nn.Module):
    """Transformer -> adaptive average pool to n_a rows -> linear to d_l."""

    def __init__(self, config: ParalinguisticAdapterConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            _SelfAttentionLayer(config.d_s, config.n_heads, config.dropout)
            for _ in range(config.n_layers)
        )
        self.proj = nn.Linear(config.d_s, config.d_l)
        seed_parameters(self, seed)

    def forward(self, features) -> torch.Tensor:
        x = _as_frame_tensor(features, self.config.d_s, self.proj.weight.dtype)
        pos = sinusoidal_positions(x.shape[0], self.config.d_s, dtype=x.dtype)
        for layer in self.layers:
            x = layer(x, pos)
        pool = adaptive_pool_matrix(x.shape[0], self.config.n_a, dtype=x.dtype)
        return self.proj(pool @ x)


class LinguisticAdapter(nn.Module):
    """Frame stacking -> Linear(d_s*k, d_h) -> ReLU -> Linear(d_h, d_l).

    No dropout: the forward pass is deterministic in train and eval mode.
    """

    def __init__(self, config: LinguisticAdapterConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.d_s * config.k, config.d_h)
        self.fc2 = nn.Linear(config.d_h, config.d_l)
        seed_parameters(self, seed)

    def forward(self, features) -> torch.Tensor:
        stacked = stack_frames(features, self.config.k, self.config.d_s)
        stacked = stacked.to(self.fc1.weight.dtype)
        return self.fc2(F.relu(self.fc1(stacked)))


def seed_parameters(module: nn.Module, seed: int):
    """Reinitialize all parameters from a dedicated generator.

    Weights ~ N(0, 0.02), biases 0, layer-norm gains 1. Construction is
    therefore deterministic given the seed regardless of global RNG state.
    """
    gen = torch.Generator().manual_seed(derive_seed(seed, "param-init"))
    with torch.no_grad():
        for name, param in module.named_parameters():
            if "norm" in name and name.endswith("weight"):
                param.fill_(1.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                values = torch.empty(
                    param.shape, dtype=torch.float32
                ).normal_(0.0, 0.02, generator=gen)
                param.copy_(values)


def adapter_parameters(adapter: nn.Module):
    """Stable (name, tensor) enumeration of all learnable tensors."""
    return list(adapter.named_parameters())


_CONFIG_CLASSES = {
    "paralinguistic": ParalinguisticAdapterConfig,
    "linguistic": LinguisticAdapterConfig,
}


def _adapter_kind(adapter: nn.Module) -> str:
    if isinstance(adapter, ParalinguisticAdapter):
        return "paralinguistic"
    if isinstance(adapter, LinguisticAdapter):
        return "linguistic"
    raise DomainError(f"not an adapter: {type(adapter).__name__}")


def save_adapter(adapter: nn.Module, path):
    """One file per adapter: config echo plus named flat arrays."""
    arrays = {
        name: param.detach().cpu().numpy() for name, param in adapter_parameters(adapter)
    }
    header = {"kind": _adapter_kind(adapter), "config": asdict(adapter.config)}
    np.savez(path, __header__=np.frombuffer(json.dumps(header).encode(), np.uint8), **arrays)


def load_adapter(path) -> nn.Module:
    data = np.load(path)
    header = json.loads(bytes(data["__header__"]).decode())
    config = _CONFIG_CLASSES[header["kind"]](**header["config"])
    adapter = (
        ParalinguisticAdapter(config)
        if header["kind"] == "paralinguistic"
        else LinguisticAdapter(config)
    )
    state = {name: torch.as_tensor(data[name]) for name in data.files if name != "__header__"}
    adapter.load_state_dict(state)
    return adapter
