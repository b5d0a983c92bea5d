"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is define-by-run: operations execute eagerly on numpy arrays and,
while a :class:`Tape` is active, append a backward rule to it. ``backward``
replays the tape in exact reverse execution order and accumulates gradients
(it adds into grad slots, never overwrites). Parameters are plain tensors
with ``requires_grad=True``; everything produced by an op is an intermediate
whose gradient lives only for the duration of one backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LOG_FLOOR = 1e-12

# Stack of recording contexts. ``None`` entries suppress recording (no_grad).
_STACK: list[Optional["Tape"]] = []

# Monotone token distinguishing backward passes; lets fused ops cache work
# that several of their grad closures share within one pass.
_PASS_COUNTER = [0]


def _active() -> Optional["Tape"]:
    return _STACK[-1] if _STACK else None


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> list:
        return list(self.data.shape)

    @property
    def values(self) -> np.ndarray:
        """Flat view of the stored values."""
        return self.data.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations and their backward rules."""

    def __init__(self):
        # Each node: (output tensor, [(input tensor, grad_fn(out_grad))...])
        self._nodes: list[tuple[Tensor, list[tuple[Tensor, Callable]]]] = []

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)


class no_grad:
    """Context that suppresses tape recording (e.g. teacher forward passes)."""

    def __enter__(self) -> None:
        _STACK.append(None)

    def __exit__(self, *exc) -> None:
        _STACK.pop()


def _record(out: Tensor, pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    tape = _active()
    if tape is None:
        return out
    tracked = [(t, fn) for t, fn in pairs if t.requires_grad or t._tape is tape]
    if tracked:
        out._tape = tape
        tape._nodes.append((out, tracked))
    return out


def backward(loss: Tensor) -> None:
    """Populate grad slots of every requires_grad ancestor of ``loss``.

    Gradients accumulate: running backward twice doubles them. Intermediate
    gradients are kept in per-call scratch storage so repeated calls stay
    linear in the recorded graph.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {tuple(loss.data.shape)}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not on a tape; run the forward pass inside `with Tape():`")
    _PASS_COUNTER[0] += 1
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, pairs in reversed(tape._nodes):
        g = scratch.get(id(out))
        if g is None:
            continue
        for t, fn in pairs:
            gi = fn(g)
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            else:
                key = id(t)
                prev = scratch.get(key)
                scratch[key] = gi if prev is None else prev + gi


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class SgdConfig:
    """Plain stochastic gradient descent; no momentum, no weight decay."""

    learning_rate: float

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")


def sgd_step(params: Sequence[Tensor], cfg: SgdConfig) -> None:
    """param <- param - lr * grad for every param, then clear the grads."""
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step requires a populated grad on every parameter")
    for p in params:
        p.data -= cfg.learning_rate * p.grad
        p.grad = None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {tuple(a.data.shape)} x {tuple(b.data.shape)}"
        )
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(out, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shape mismatch {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    out = Tensor(a.data + b.data)
    return _record(out, [(a, lambda g: g), (b, lambda g: g)])


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, [(a, lambda g: g * c)])


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {tuple(a.data.shape)}")
    out = Tensor(a.data.T.copy())
    return _record(out, [(a, lambda g: g.T)])


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != cols:
            raise DimensionError(
                f"concat_rows: column mismatch {tuple(p.data.shape)} vs {cols} columns"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])
    pairs = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]
        pairs.append((p, lambda g, lo=lo, hi=hi: g[lo:hi]))
    return _record(out, pairs)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {tuple(a.data.shape)}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for {a.data.shape[0]} rows")
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def grad_a(g, idx=idx, shape=shape):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return _record(out, [(a, grad_a)])


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shape = a.data.shape
    return _record(out, [(a, lambda g: np.full(shape, float(g)))])


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {tuple(a.data.shape)}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)
    return _record(out, [(a, lambda g: p * (g - (g * p).sum(axis=1, keepdims=True)))])


def gelu(a: Tensor) -> Tensor:
    # Sigmoid form x * sigmoid(1.702 x), the variant common in dual-encoder
    # vision-language stacks. Smooth everywhere, which keeps finite-difference
    # gradient checks tight; the derivative is evaluated lazily so that
    # forward-only passes never pay for it.
    x = a.data
    s = 1.0 / (1.0 + np.exp(-1.702 * x))
    out = Tensor(x * s)

    def grad_a(g):
        return g * (s * (1.0 + 1.702 * x * (1.0 - s)))

    return _record(out, [(a, grad_a)])


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gain and bias."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    if a.data.ndim != 2 or gain.data.shape != (a.data.shape[1],) or bias.data.shape != gain.data.shape:
        raise DimensionError(
            f"layer_norm: got input {tuple(a.data.shape)}, gain {tuple(gain.data.shape)}, "
            f"bias {tuple(bias.data.shape)}"
        )
    x = a.data
    inv_d = 1.0 / x.shape[1]
    mu = x.sum(axis=1, keepdims=True) * inv_d
    xc = x - mu
    var = (xc * xc).sum(axis=1, keepdims=True) * inv_d  # biased variance
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def grad_a(g):
        dxhat = g * gd
        m1 = dxhat.sum(axis=1, keepdims=True) * inv_d
        m2 = (dxhat * xhat).sum(axis=1, keepdims=True) * inv_d
        return inv * (dxhat - m1 - xhat * m2)

    return _record(out, [
        (a, grad_a),
        (gain, lambda g: (g * xhat).sum(axis=0)),
        (bias, lambda g: g.sum(axis=0)),
    ])


def l2_normalize_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got {tuple(a.data.shape)}")
    n = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    n = np.maximum(n, 1e-30)
    y = a.data / n
    out = Tensor(y)
    return _record(out, [(a, lambda g: (g - y * (g * y).sum(axis=1, keepdims=True)) / n)])


def mix(parts: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Weighted sum of same-shape tensors, weights given as a 1 x t row."""
    t = len(parts)
    if weights.data.shape != (1, t):
        raise DimensionError(f"mix: weights shape {tuple(weights.data.shape)} != (1, {t})")
    shape = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape:
            raise DimensionError(f"mix: part shape {tuple(p.data.shape)} != {shape}")
    w = weights.data[0]
    acc = w[0] * parts[0].data
    for i in range(1, t):
        acc += w[i] * parts[i].data
    out = Tensor(acc)
    pairs: list[tuple[Tensor, Callable]] = []
    for i, p in enumerate(parts):
        pairs.append((p, lambda g, wi=float(w[i]): wi * g))
    datas = [p.data for p in parts]
    pairs.append((weights, lambda g: np.array([[float((g * h).sum()) for h in datas]])))
    return _record(out, pairs)


def cross_entropy(pred_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log p[label], probabilities clamped at 1e-12."""
    if pred_probs.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {tuple(pred_probs.data.shape)}")
    b, c = pred_probs.data.shape
    lab = np.asarray(labels, dtype=np.intp)
    if lab.shape != (b,):
        raise DimensionError(f"cross_entropy: {len(lab)} labels for batch of {b}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    picked = pred_probs.data[np.arange(b), lab]
    clamped = np.maximum(picked, LOG_FLOOR)
    out = Tensor(-np.log(clamped).mean())

    def grad_p(g):
        z = np.zeros((b, c))
        active = picked > LOG_FLOOR
        z[np.arange(b), lab] = -float(g) / b * active / clamped
        return z

    return _record(out, [(pred_probs, grad_p)])


def kl_divergence(teacher_probs: Tensor, student_probs: Tensor) -> Tensor:
    """Mean over the batch of sum_c teacher * log(teacher / student).

    The gradient flows only into the student; the teacher is treated as a
    constant even when it carries requires_grad.
    """
    if teacher_probs.data.shape != student_probs.data.shape:
        raise DimensionError(
            f"kl_divergence: shape mismatch {tuple(teacher_probs.data.shape)} vs "
            f"{tuple(student_probs.data.shape)}"
        )
    if teacher_probs.data.ndim != 2:
        raise DimensionError("kl_divergence expects (batch, classes) inputs")
    b = teacher_probs.data.shape[0]
    t = teacher_probs.data
    s = student_probs.data
    tc = np.maximum(t, LOG_FLOOR)
    sc = np.maximum(s, LOG_FLOOR)
    out = Tensor((t * (np.log(tc) - np.log(sc))).sum(axis=1).mean())

    def grad_s(g):
        return -float(g) / b * t / sc * (s > LOG_FLOOR)

    return _record(out, [(student_probs, grad_s)])


def prompted_attention(
    q: Tensor,
    k_x: Tensor,
    v_x: Tensor,
    k_p: Optional[Tensor],
    v_p: Optional[Tensor],
    num_heads: int,
    n_seq: int,
) -> Tensor:
    """Multi-head attention of queries over [prompt keys, own keys].

    ``q``, ``k_x`` and ``v_x`` hold ``n_seq`` stacked sequences of equal
    length; ``k_p``/``v_p`` are projections of an optional prompt shared by
    every sequence in the stack. Prompt slots come first in the key/value
    concatenation, queries are never taken from the prompt, so the output
    length equals the input length. Scores are scaled by 1/sqrt(head_dim)
    and softmaxed with per-row max subtraction.
    """
    rows, d = q.data.shape
    if d % num_heads != 0:
        raise DimensionError(f"hidden dim {d} not divisible by {num_heads} heads")
    if rows % n_seq != 0:
        raise DimensionError(f"{rows} stacked rows not divisible by {n_seq} sequences")
    c = rows // n_seq
    dh = d // num_heads
    s = 1.0 / math.sqrt(dh)
    has_p = k_p is not None and k_p.data.shape[0] > 0
    cp = k_p.data.shape[0] if has_p else 0

    def split(arr, n):  # (n*c, d) -> (n, heads, c, dh)
        return arr.reshape(n, -1, num_heads, dh).transpose(0, 2, 1, 3)

    Q = split(q.data, n_seq)
    KX = split(k_x.data, n_seq)
    VX = split(v_x.data, n_seq)
    scores_x = (Q @ KX.transpose(0, 1, 3, 2)) * s
    if has_p:
        KP = k_p.data.reshape(cp, num_heads, dh).transpose(1, 0, 2)  # (heads, cp, dh)
        VP = v_p.data.reshape(cp, num_heads, dh).transpose(1, 0, 2)
        scores_p = (Q @ KP.transpose(0, 2, 1)[None]) * s
        S = np.concatenate([scores_p, scores_x], axis=3)
    else:
        S = scores_x
    S -= S.max(axis=3, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=3, keepdims=True)
    Px = P[..., cp:]
    o = Px @ VX
    if has_p:
        Pp = P[..., :cp]
        o += Pp @ VP[None]
    out = Tensor(o.transpose(0, 2, 1, 3).reshape(rows, d))

    def merge(arr):  # (n_seq, heads, c, dh) -> (n_seq*c, d)
        return arr.transpose(0, 2, 1, 3).reshape(rows, d)

    # The grad closures below share G (split upstream grad) and dS (score
    # grad); both are cached per backward pass since several inputs need them.
    cache: dict = {"pass": None}

    def shared(g):
        token = (_PASS_COUNTER[0], id(g))
        if cache["pass"] != token:
            G = split(g, n_seq)
            dPx = G @ VX.transpose(0, 1, 3, 2)
            if has_p:
                dPp = G @ VP.transpose(0, 2, 1)[None]
                dP = np.concatenate([dPp, dPx], axis=3)
            else:
                dP = dPx
            dS = P * (dP - (dP * P).sum(axis=3, keepdims=True))
            cache["pass"] = token
            cache["G"] = G
            cache["dS"] = dS
        return cache["G"], cache["dS"]

    def grad_q(g):
        _, dS = shared(g)
        dQ = dS[..., cp:] @ KX
        if has_p:
            dQ += dS[..., :cp] @ KP[None]
        return merge(dQ) * s

    def grad_kx(g):
        _, dS = shared(g)
        return merge(dS[..., cp:].transpose(0, 1, 3, 2) @ Q) * s

    def grad_vx(g):
        G, _ = shared(g)
        return merge(Px.transpose(0, 1, 3, 2) @ G)

    pairs: list[tuple[Tensor, Callable]] = [(q, grad_q), (k_x, grad_kx), (v_x, grad_vx)]
    if has_p:
        flat_q = Q.transpose(1, 0, 2, 3).reshape(num_heads, n_seq * c, dh)

        def grad_kp(g):
            _, dS = shared(g)
            dSp = dS[..., :cp].transpose(1, 3, 0, 2).reshape(num_heads, cp, n_seq * c)
            return (dSp @ flat_q).transpose(1, 0, 2).reshape(cp, d) * s

        def grad_vp(g):
            G, _ = shared(g)
            flat_g = G.transpose(1, 0, 2, 3).reshape(num_heads, n_seq * c, dh)
            PpT = Pp.transpose(1, 3, 0, 2).reshape(num_heads, cp, n_seq * c)
            return (PpT @ flat_g).transpose(1, 0, 2).reshape(cp, d)

        pairs.append((k_p, grad_kp))
        pairs.append((v_p, grad_vp))
    return _record(out, pairs)
