"""Toy byte-level decoder-only transformer.

Pre-norm blocks with RMSNorm, causal multi-head attention with rotary
positions, a SiLU-gated FFN, and an output projection tied to the token
embedding. Layers share a tiny protocol: ``__call__`` on a :class:`Tensor`,
``named_parameters(prefix)`` and ``layout()`` (a JSON-able structural
description used by the checkpoint format).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import ShapeError, TokenRangeError

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class Linear:
    """Dense projection ``x @ weight`` with weight of shape (d_in, d_out)."""

    kind = "dense"

    def __init__(self, weight):
        self.weight = weight if isinstance(weight, Parameter) else Parameter(weight)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight)

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.weight": self.weight}

    def layout(self) -> dict:
        return {"kind": self.kind}

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def dense_weight(self) -> np.ndarray:
        return self.weight.data


class GatedFfn:
    kind = "dense"

    def __init__(self, w_g, w_u, w_d):
        self.w_g = w_g if isinstance(w_g, Parameter) else Parameter(w_g)
        self.w_u = w_u if isinstance(w_u, Parameter) else Parameter(w_u)
        self.w_d = w_d if isinstance(w_d, Parameter) else Parameter(w_d)
        d_model, d_ff = self.w_g.shape
        if self.w_u.shape != (d_model, d_ff) or self.w_d.shape != (d_ff, d_model):
            raise ShapeError(
                f"inconsistent FFN shapes: w_g {self.w_g.shape}, w_u {self.w_u.shape}, "
                f"w_d {self.w_d.shape}"
            )

    @property
    def d_model(self) -> int:
        return self.w_g.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w_g.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        gate = ad.matmul(x, self.w_g)
        up = ad.silu(ad.matmul(x, self.w_u))
        return ad.matmul(ad.mul(gate, up), self.w_d)

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.w_g": self.w_g, f"{prefix}.w_u": self.w_u, f"{prefix}.w_d": self.w_d}

    def layout(self) -> dict:
        return {"kind": self.kind}


def ffn_forward(ffn, x) -> np.ndarray:
    """Evaluate any FFN layer on a (tokens x d_model) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != ffn.d_model:
        raise ShapeError(f"expected input with {ffn.d_model} columns, got shape {x.shape}")
    return ffn(Tensor(x)).data


class Attention:
    def __init__(self, q, k, v, o, n_heads: int):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.n_heads = n_heads

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.n_heads
        hd = d // h

        def heads(proj):
            y = ad.reshape(proj(x), (b, t, h, hd))
            return ad.transpose(y, (0, 2, 1, 3))

        q = ad.rope(heads(self.q))
        k = ad.rope(heads(self.k))
        v = heads(self.v)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        out = ad.matmul(ad.causal_softmax(scores), v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.o(out)

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        out = {}
        for name in ("q", "k", "v", "o"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out

    def layout(self) -> dict:
        return {name: getattr(self, name).layout() for name in ("q", "k", "v", "o")}


class TransformerBlock:
    def __init__(self, attn_norm, attn: Attention, ffn_norm, ffn):
        self.attn_norm = attn_norm if isinstance(attn_norm, Parameter) else Parameter(attn_norm)
        self.attn = attn
        self.ffn_norm = ffn_norm if isinstance(ffn_norm, Parameter) else Parameter(ffn_norm)
        self.ffn = ffn

    def __call__(self, x: Tensor, tap: dict | None = None) -> Tensor:
        h = ad.add(x, self.attn(ad.rms_norm(x, self.attn_norm)))
        normed = ad.rms_norm(h, self.ffn_norm)
        out = ad.add(h, self.ffn(normed))
        if tap is not None:
            tap["block_in"] = x.data
            tap["ffn_in"] = h.data
            tap["ffn_input"] = normed.data
            tap["ffn_out"] = out.data
            tap["block_out"] = out.data
        return out

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        out = {f"{prefix}.attn_norm": self.attn_norm}
        out.update(self.attn.named_parameters(f"{prefix}.attn"))
        out[f"{prefix}.ffn_norm"] = self.ffn_norm
        out.update(self.ffn.named_parameters(f"{prefix}.ffn"))
        return out

    def layout(self) -> dict:
        return {"attn": self.attn.layout(), "ffn": self.ffn.layout()}


class TransformerModel:
    def __init__(self, config: ModelConfig, embed, blocks: list[TransformerBlock], final_norm):
        if len(blocks) != config.n_layers:
            raise ValueError(f"expected {config.n_layers} blocks, got {len(blocks)}")
        self.config = config
        self.embed = embed if isinstance(embed, Parameter) else Parameter(embed)
        self.blocks = blocks
        self.final_norm = final_norm if isinstance(final_norm, Parameter) else Parameter(final_norm)

    def named_parameters(self) -> dict[str, Parameter]:
        out = {"embed": self.embed}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"blocks.{i}"))
        out["final_norm"] = self.final_norm
        return out

    def layout(self) -> dict:
        return {"blocks": [b.layout() for b in self.blocks]}

    def n_params(self) -> int:
        return sum(p.n_effective for p in self.named_parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.set_trainable(flag)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters().items() if p.trainable]

    def copy(self) -> "TransformerModel":
        return copy.deepcopy(self)

    def rounded_to_float32(self) -> "TransformerModel":
        out = self.copy()
        for p in out.named_parameters().values():
            p.data = p.data.astype(np.float32).astype(np.float64)
        return out

    def check_tokens(self, tokens, extra: int = 0) -> np.ndarray:
        """Validate a token batch; ``extra=1`` admits (seq+1)-long LM windows."""
        ids = np.asarray(tokens)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ShapeError(f"token batch must be 2-D (batch x seq), got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise TokenRangeError(f"token ids must be integers, got dtype {ids.dtype}")
        if ids.shape[1] > self.config.max_seq_len + extra:
            raise ShapeError(
                f"sequence length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise TokenRangeError(
                f"token ids must lie in [0, {self.config.vocab_size}), "
                f"got range [{ids.min()}, {ids.max()}]"
            )
        return ids.astype(np.int64, copy=False)

    def forward_tensor(self, ids: np.ndarray, taps: list | None = None) -> Tensor:
        x = ad.embedding(self.embed, ids)
        for block in self.blocks:
            tap = None
            if taps is not None:
                tap = {}
                taps.append(tap)
            x = block(x, tap)
        x = ad.rms_norm(x, self.final_norm)
        return ad.matmul(x, ad.transpose(self.embed, (1, 0)))

    def loss_tensor(self, batch) -> Tensor:
        """LM loss of a (batch x seq+1) window array: predict ids[:, 1:]."""
        batch = np.asarray(batch)
        logits = self.forward_tensor(batch[:, :-1])
        return ad.cross_entropy(logits, batch[:, 1:])


def forward(model: TransformerModel, tokens, taps: bool = False):
    """Logits of shape (batch, seq, vocab); with ``taps`` also per-block activations.

    Each tap dict holds ``block_in``/``block_out`` (residual stream around the
    whole block), ``ffn_in``/``ffn_out`` (residual stream around the FFN
    sub-block) and ``ffn_input`` (the post-norm activation fed to the FFN).
    """
    ids = model.check_tokens(tokens)
    tap_list = [] if taps else None
    logits = model.forward_tensor(ids, tap_list).data
    return (logits, tap_list) if taps else logits


def lm_loss(logits, targets) -> float:
    """Mean next-token cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    flat = logits.reshape(-1, logits.shape[-1])
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(flat.shape[0]), targets.reshape(-1)]))


def batch_loss(model: TransformerModel, batch) -> float:
    batch = model.check_tokens(batch, extra=1)
    return lm_loss(forward(model, batch[:, :-1]), batch[:, 1:])


def init_model(config: ModelConfig) -> TransformerModel:
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    embed = normal(config.vocab_size, d)
    blocks = []
    for _ in range(config.n_layers):
        attn = Attention(
            Linear(normal(d, d)), Linear(normal(d, d)), Linear(normal(d, d)), Linear(normal(d, d)),
            config.n_heads,
        )
        ffn = GatedFfn(normal(d, f), normal(d, f), normal(f, d))
        blocks.append(TransformerBlock(np.ones(d), attn, np.ones(d), ffn))
    return TransformerModel(config, embed, blocks, np.ones(d))


def evaluate_loss(model: TransformerModel, batches) -> float:
    """Token-weighted mean LM loss over a sequence of (batch x seq+1) windows."""
    total = 0.0
    count = 0
    for batch in batches:
        batch = np.asarray(batch)
        n = batch.shape[0] * (batch.shape[1] - 1)
        total += batch_loss(model, batch) * n
        count += n
    if count == 0:
        raise ValueError("evaluate_loss needs at least one batch")
    return total / count
