"""Masked Symbol Transformer.

Two-channel (I, Q) sample sequences are projected to ``d_model`` features,
summed with fixed sinusoidal positions and passed through a pre-norm
Transformer encoder. Encoder outputs over each masked symbol's span are
mean-pooled and classified over the symbol vocabulary.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .constellation import build_vocabulary
from .masking import MaskSpec
from .waveform import Waveform

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 512
    n_blocks: int = 6
    n_heads: int = 8
    d_ff: int | None = None  # defaults to 4 * d_model
    vocab_size: int = 272
    max_len: int = 1024
    proj_kernel: int = 1
    shared_weights: bool = False

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if self.proj_kernel < 1 or self.proj_kernel % 2 == 0:
            raise ValueError("proj_kernel must be a positive odd integer")
        if self.vocab_size != build_vocabulary().size:
            raise ValueError(f"vocab_size must be {build_vocabulary().size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def positional_encoding(n: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("width must be even")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        h = self.n_heads

        def split(t):
            return t.view(B, N, h, D // h).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        # exact softmax(q k^T / sqrt(d_head)) v, fused
        ctx = F.scaled_dot_product_attention(q, k, v)
        return self.out(ctx.transpose(1, 2).reshape(B, N, D))


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


class MaskedSymbolTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.projection = nn.Conv1d(2, c.d_model, c.proj_kernel, padding=c.proj_kernel // 2)
        self.register_buffer(
            "positions",
            torch.from_numpy(positional_encoding(c.max_len, c.d_model)),
            persistent=False,
        )
        n_unique = 1 if c.shared_weights else c.n_blocks
        self.blocks = nn.ModuleList(EncoderBlock(c.d_model, c.n_heads, c.d_ff) for _ in range(n_unique))
        self.final_norm = nn.LayerNorm(c.d_model)
        self.classifier = nn.Linear(c.d_model, c.vocab_size)

    def encode(self, samples: torch.Tensor) -> torch.Tensor:
        """(B, 2, N) samples -> (B, N, d_model) encoder outputs."""
        N = samples.shape[-1]
        if N > self.config.max_len:
            raise ValueError(f"sequence length {N} exceeds max_len={self.config.max_len}")
        x = self.projection(samples).transpose(1, 2)
        x = x + self.positions[:N].to(x.dtype)
        for i in range(self.config.n_blocks):
            x = self.blocks[0 if self.config.shared_weights else i](x)
        return self.final_norm(x)

    def forward(self, samples: torch.Tensor, symbol_mask: torch.Tensor) -> torch.Tensor:
        """Logits for every masked symbol, in row-major (waveform, symbol) order.

        samples: (B, 2, N); symbol_mask: (B, K) bool with N = K * sps.
        """
        B, K = symbol_mask.shape
        h = self.encode(samples)
        if h.shape[1] % K:
            raise ValueError(f"{h.shape[1]} samples do not split into {K} symbols")
        pooled = h.view(B, K, h.shape[1] // K, -1).mean(dim=2)
        logits = self.classifier(pooled[symbol_mask])
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits in forward pass")
        return logits


def init_params(model: MaskedSymbolTransformer, rng: np.random.Generator) -> MaskedSymbolTransformer:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norms identity."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            if isinstance(_owner(model, name), nn.LayerNorm):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.shape))))
    return model


def _owner(model: nn.Module, param_name: str) -> nn.Module:
    return model.get_submodule(param_name.rsplit(".", 1)[0])


def build_model(
    config: ModelConfig, seed: int | np.random.Generator = 0, dtype: torch.dtype = torch.float32
) -> MaskedSymbolTransformer:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    model = MaskedSymbolTransformer(config).to(torch.float64)
    init_params(model, rng)
    return model.to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- batching ----------------------------------------------------------------


def stack_batch(
    waves: Sequence[Waveform], specs: Sequence[MaskSpec], dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Masked waveforms -> (samples (B,2,N), symbol mask (B,K), target IDs)."""
    samples = np.stack([np.stack([w.i_samples, w.q_samples]) for w in waves])
    mask = np.stack([s.symbol_mask(w.num_symbols) for w, s in zip(waves, specs)])
    ids = np.stack([w.symbol_ids for w in waves])
    return (
        torch.from_numpy(samples).to(dtype),
        torch.from_numpy(mask),
        torch.from_numpy(ids[mask]).long(),
    )


def forward(
    model: MaskedSymbolTransformer, waves: Sequence[Waveform], specs: Sequence[MaskSpec]
) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    samples, mask, _ = stack_batch(waves, specs, dtype)
    return model(samples, mask)


def masked_loss(logits: torch.Tensor, targets: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    """sum_r w[t_r] CE_r / sum_r w[t_r] over masked rows."""
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ValueError("target ID outside the vocabulary")
    return F.cross_entropy(logits, targets, weight=class_weights.to(logits.dtype))


def backward(
    model: MaskedSymbolTransformer,
    logits: torch.Tensor,
    targets: torch.Tensor,
    class_weights: torch.Tensor,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Weighted masked cross-entropy and its gradient for every parameter."""
    loss = masked_loss(logits, targets, class_weights)
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }
    return float(loss.detach()), grads


# -- checkpoints --------------------------------------------------------------
#
# A checkpoint is an .npz archive: one array per parameter (little-endian
# float64) plus a "__manifest__" JSON string holding the format version,
# the ModelConfig and the expected shape of every tensor.


def write_npz(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """``np.savez`` layout with fixed zip timestamps, so identical arrays give identical bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, a in arrays.items():
            with zf.open(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as fh:
                np.lib.format.write_array(fh, np.asanyarray(a), allow_pickle=False)
    Path(path).write_bytes(buf.getvalue())


def save_checkpoint(path: str | Path, model: MaskedSymbolTransformer, extra: dict | None = None) -> None:
    arrays = {n: p.detach().to(torch.float64).numpy() for n, p in model.state_dict().items()}
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "shapes": {n: list(a.shape) for n, a in arrays.items()},
        "extra": extra or {},
    }
    write_npz(path, {"__manifest__": np.array(json.dumps(manifest)), **arrays})


class CheckpointError(ValueError):
    pass


def load_checkpoint(
    path: str | Path, dtype: torch.dtype = torch.float32
) -> tuple[MaskedSymbolTransformer, dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__manifest__" not in data:
            raise CheckpointError(f"{path}: missing manifest")
        manifest = json.loads(str(data["__manifest__"]))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        config = ModelConfig.from_dict(manifest["config"])
        model = MaskedSymbolTransformer(config).to(torch.float64)
        expected = {n: list(t.shape) for n, t in model.state_dict().items()}
        if expected != manifest["shapes"]:
            raise CheckpointError(f"{path}: manifest shapes do not match the configured model")
        state = {}
        for name, shape in expected.items():
            if name not in data or list(data[name].shape) != shape:
                raise CheckpointError(f"{path}: tensor {name!r} missing or mis-shaped")
            state[name] = torch.from_numpy(data[name])
    model.load_state_dict(state)
    return model.to(dtype), manifest
