"""Small BERT-style encoder with a [CLS] linear decoder and a tied MLM head."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import ConfigMismatch, CorruptCheckpoint, GraphNotRecorded, ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_tokens: int = 256
    hidden_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    feedforward_dim: int = 256
    num_phenotypes: int = 4
    dropout_rate: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "max_tokens", "hidden_dim", "num_layers", "num_heads",
                     "feedforward_dim", "num_phenotypes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


def _dropout(x: torch.Tensor, p: float, active: bool, gen: torch.Generator | None) -> torch.Tensor:
    if not active or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


class EncoderLayer(nn.Module):
    """Post-LN block: attention + residual + LN, then GELU feedforward + residual + LN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.num_heads = cfg.num_heads
        self.p = cfg.dropout_rate
        self.query = nn.Linear(H, H)
        self.key = nn.Linear(H, H)
        self.value = nn.Linear(H, H)
        self.output = nn.Linear(H, H)
        self.attn_norm = nn.LayerNorm(H, eps=1e-12)
        self.ff_in = nn.Linear(H, cfg.feedforward_dim)
        self.ff_out = nn.Linear(cfg.feedforward_dim, H)
        self.ff_norm = nn.LayerNorm(H, eps=1e-12)

    def forward(self, x, key_pad, train, gen, keep_attention=False):
        B, n, H = x.shape
        h = self.num_heads
        dh = H // h

        def heads(t):
            return t.view(B, n, h, dh).transpose(1, 2)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = _dropout(attn, self.p, train, gen) @ v
        ctx = ctx.transpose(1, 2).reshape(B, n, H)
        x = self.attn_norm(x + _dropout(self.output(ctx), self.p, train, gen))
        ff = self.ff_out(nn.functional.gelu(self.ff_in(x)))
        x = self.ff_norm(x + _dropout(ff, self.p, train, gen))
        return x, (attn if keep_attention else None)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = cfg
        H = cfg.hidden_dim
        self.token_embedding = nn.Parameter(torch.empty(cfg.vocab_size, H))
        self.position_embedding = nn.Parameter(torch.empty(cfg.max_tokens, H))
        self.embedding_norm = nn.LayerNorm(H, eps=1e-12)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.decoder = nn.Linear(H, cfg.num_phenotypes)
        self.mlm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None) -> None:
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") or "norm" in name:
                    p.fill_(1.0 if ("norm" in name and name.endswith("weight")) else 0.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * self.config.init_std)

    def encode(
        self,
        ids: torch.Tensor,
        attention_mask: torch.Tensor,
        train: bool = False,
        generator: torch.Generator | None = None,
        return_attention: bool = False,
    ):
        """Hidden states ``(B, n, hidden_dim)`` for token ids ``(B, n)``.

        Padded keys receive zero attention, so padded token ids cannot
        influence any other position.
        """
        if ids.dim() == 1:
            ids, attention_mask = ids[None], attention_mask[None]
        if ids.shape != attention_mask.shape:
            raise ShapeMismatch(f"ids {tuple(ids.shape)} vs mask {tuple(attention_mask.shape)}")
        n = ids.shape[1]
        if n > self.config.max_tokens:
            raise ShapeMismatch(f"sequence length {n} > max_tokens {self.config.max_tokens}")
        if int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0:
            raise ShapeMismatch("token id outside vocabulary")
        p = self.config.dropout_rate
        x = self.token_embedding[ids] + self.position_embedding[:n]
        x = _dropout(self.embedding_norm(x), p, train, generator)
        key_pad = attention_mask == 0
        attns = []
        for layer in self.layers:
            x, a = layer(x, key_pad, train, generator, return_attention)
            attns.append(a)
        return (x, attns) if return_attention else x

    def classify(self, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits and sigmoid probabilities from the [CLS] position only."""
        z = self.decoder(hidden[..., 0, :])
        return z, torch.sigmoid(z)

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.token_embedding.T + self.mlm_bias

    def forward(self, ids, attention_mask, train=False, generator=None):
        return self.classify(self.encode(ids, attention_mask, train, generator))[0]


def parameter_gradients(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter.

    Parameters that do not influence ``loss`` get a zero tensor.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None or not loss.requires_grad:
        raise GraphNotRecorded("loss was not computed with gradient recording enabled")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)
    }


# -- checkpoints --------------------------------------------------------------

MAGIC = b"EHRFCKPT\x01"


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: TextEncoder, step: int = 0, rng_state: dict | None = None):
        tensors = {
            n: p.detach().to(torch.float32).cpu().numpy().copy() for n, p in model.named_parameters()
        }
        return cls(model.config, tensors, step, dict(rng_state or {}))

    def to_model(self, dtype=torch.float32) -> TextEncoder:
        model = TextEncoder(self.config)
        load_tensors(model, self.tensors, dtype)
        return model


def load_tensors(model: nn.Module, tensors: Mapping[str, np.ndarray], dtype=torch.float32,
                 strict: bool = True) -> None:
    own = dict(model.named_parameters())
    with torch.no_grad():
        for name, arr in tensors.items():
            if name not in own:
                if strict:
                    raise ConfigMismatch(f"unexpected tensor {name}")
                continue
            if tuple(own[name].shape) != arr.shape:
                raise ConfigMismatch(f"{name}: shape {arr.shape} vs {tuple(own[name].shape)}")
            own[name].copy_(torch.from_numpy(np.array(arr, dtype=np.float32)))
    model.to(dtype)


def _encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"config": asdict(ckpt.config), "step": int(ckpt.step), "rng_state": ckpt.rng_state},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        bname = name.encode("utf-8")
        buf.write(struct.pack("<I", len(bname)))
        buf.write(bname)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = arr.tobytes(order="C")
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(_encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("unexpected end of checkpoint data")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"bad header: {exc}") from None
    if expected is not None and config != expected:
        raise ConfigMismatch(f"checkpoint config {config} != expected {expected}")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpoint(f"{name}: length does not match shape {shape}")
        tensors[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.data):
        raise CorruptCheckpoint("trailing bytes after last tensor")
    return Checkpoint(config, tensors, header["step"], header.get("rng_state", {}))
