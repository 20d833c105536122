"""Tape-based reverse-mode differentiation, AdamW, and the training loop.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
op whose inputs need gradients appends a node to it; ``Tape.backward`` walks
the nodes in reverse recording order, so gradient accumulation order is fixed.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .exceptions import GraphConsumedError, MissingGradientError, TrainingDivergedError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A leaf tensor owned by a model.

    ``mask`` (optional) marks the only entries allowed to be nonzero; it is
    used for the sparse corrective term.
    """

    __slots__ = ("trainable", "mask")

    def __init__(self, data, trainable: bool = True, mask: np.ndarray | None = None):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag
        if not flag:
            self.grad = None

    @property
    def n_effective(self) -> int:
        if self.mask is not None:
            return int(self.mask.sum())
        return int(self.data.size)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable


class Tape:
    """Records differentiable ops executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        if self._consumed:
            raise GraphConsumedError("cannot record onto a tape that has been consumed")
        self._nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it."""
        if self._consumed:
            raise GraphConsumedError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_ids = set()
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            for p, pg in zip(node.parents, node.backward(g, needs)):
                if pg is None or not p.requires_grad:
                    continue
                if isinstance(p, Parameter):
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                    leaf_ids.add(id(p))
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self._nodes.clear()


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    req = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- primitive ops -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    # (..., k) @ (k, n) runs as one 2-D GEMM
    flat = ad.ndim > 2 and bd.ndim == 2
    a2 = ad.reshape(-1, ad.shape[-1]) if flat else ad

    def backward(g, needs):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if needs[0]:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if needs[1]:
                gb = a2.T @ g2
            return ga, gb
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)) if flat else ad @ bd
    return _make(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _make(ad * bd, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g, needs: (g * c,))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g, needs):
        return (g * (sig + out * (1.0 - sig)),)

    return _make(out, (x,), backward)


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * weight`` over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def backward(g, needs):
        gx = gw = None
        if needs[1]:
            gw = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        if needs[0]:
            gh = g * wd
            gx = inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _make(xhat * wd, (x, weight), backward)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(old),))


def transpose(x, axes: tuple) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g, needs: (np.transpose(g, inverse),))


def causal_softmax(scores) -> Tensor:
    """Softmax over the last axis with future positions (j > i) masked out."""
    scores = as_tensor(scores)
    p = scores.data + _causal_mask(scores.shape[-2], scores.shape[-1])
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        gs = g * p
        gs -= p * gs.sum(axis=-1, keepdims=True)
        return (gs,)

    return _make(p, (scores,), backward)


_MASK_CACHE: dict = {}


def _causal_mask(rows: int, cols: int) -> np.ndarray:
    key = (rows, cols)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = np.triu(np.full((rows, cols), -np.inf), k=1)
    return _MASK_CACHE[key]


def rope(x, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on (..., T, head_dim) with even head_dim."""
    x = as_tensor(x)
    t, hd = x.shape[-2], x.shape[-1]
    cos, sin = _rope_tables(t, hd, base)
    xd = x.data
    x1, x2 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def backward(g, needs):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _make(out, (x,), backward)


_ROPE_CACHE: dict = {}


def _rope_tables(t: int, hd: int, base: float):
    key = (t, hd, base)
    if key not in _ROPE_CACHE:
        freqs = base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
        angles = np.arange(t, dtype=np.float64)[:, None] * freqs[None, :]
        _ROPE_CACHE[key] = (np.cos(angles), np.sin(angles))
    return _ROPE_CACHE[key]


def embedding(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)

    def backward(g, needs):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits[..., V]`` against integer ``targets``."""
    logits = as_tensor(logits)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = np.asarray(targets).reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp_t = z[np.arange(tgt.size), tgt] - logsumexp
    loss = -np.mean(logp_t)

    def backward(g, needs):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(tgt.size), tgt] -= 1.0
        return ((p * (g / tgt.size)).reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), backward)


def sum_squares(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.asarray(np.sum(x.data * x.data)), (x,), lambda g, needs: (2.0 * g * x.data,))


def mean_squares(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(
        np.asarray(np.sum(x.data * x.data) / n), (x,), lambda g, needs: (2.0 * g * x.data / n,)
    )


def value_and_grad(fn: Callable[[], Tensor], params: Sequence[Parameter]) -> tuple[float, list]:
    """Evaluate ``fn`` under a fresh tape and return (loss, grads for params)."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return float(loss.data), [p.grad for p in params]


# -- optimizer ---------------------------------------------------------------


def cosine_lr(step: int, lr: float, total_steps: int, warmup_steps: int = 0) -> float:
    """Learning rate for 1-based ``step``: linear warmup then cosine decay to 0."""
    if warmup_steps > 0 and step <= warmup_steps:
        return lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    The update for step t is ``p <- p * (1 - lr * weight_decay) - lr_t * m_hat /
    (sqrt(v_hat) + eps)``: decay uses the base rate, the adaptive term the
    scheduled rate ``lr_t``.
    """

    params: dict[str, Parameter]
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 1
    warmup_steps: int = 0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if p.trainable:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def current_lr(self, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        return cosine_lr(step, self.lr, self.total_steps, self.warmup_steps)

    def step(self) -> None:
        trainable = [(n, p) for n, p in self.params.items() if p.trainable]
        for name, p in trainable:
            if p.grad is None:
                raise MissingGradientError(f"trainable parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        lr_t = self.current_lr(t)
        b1, b2 = self.betas
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in trainable:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= lr_t * update
            if p.mask is not None:
                p.data *= p.mask


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    eval_every: int = 0
    seed: int = 0

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))


@dataclass
class LossHistory:
    train: list[float] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train": self.train,
            "validation": [[s, v] for s, v in self.validation],
            "lr": self.lr,
        }


def train_loop(
    model,
    batches: Iterator[np.ndarray],
    config: TrainConfig,
    evaluate: Callable[[], float] | None = None,
    log: Callable[[int, float], None] | None = None,
) -> LossHistory:
    """Run ``config.steps`` AdamW steps on ``model.loss_tensor(batch)``.

    ``evaluate`` is called every ``config.eval_every`` steps (if > 0) and once
    after the final step.
    """
    params = model.named_parameters()
    trainable = {n: p for n, p in params.items() if p.trainable}
    if not trainable:
        raise ValueError("train_loop needs at least one trainable parameter")
    opt = AdamW(
        trainable,
        lr=config.lr,
        weight_decay=config.weight_decay,
        total_steps=config.steps,
        warmup_steps=config.warmup_steps,
    )
    history = LossHistory()
    plist = list(trainable.values())
    for step in range(1, config.steps + 1):
        batch = next(batches)
        loss, _ = value_and_grad(lambda: model.loss_tensor(batch), plist)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        opt.step()
        history.train.append(loss)
        history.lr.append(opt.current_lr())
        if log is not None:
            log(step, loss)
        if evaluate is not None and config.eval_every and step % config.eval_every == 0:
            history.validation.append((step, evaluate()))
    if evaluate is not None and (not history.validation or history.validation[-1][0] != config.steps):
        history.validation.append((config.steps, evaluate()))
    for p in plist:
        p.grad = None
    return history


def finite_difference_grad(f: Callable[[], float], param: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def iter_forever(items: Iterable) -> Iterator:
    while True:
        yield from items
