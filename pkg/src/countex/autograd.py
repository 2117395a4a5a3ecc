"""Reverse-mode automatic differentiation over dense 2D float64 matrices.

The engine is define-by-run: every operation returns a fresh `Tensor` that
remembers its parents and a closure accumulating gradients into them.  Calling
:func:`backward` on a 1x1 result walks the graph once in reverse topological
order.  Graphs are rebuilt on every forward pass; only leaf tensors (the
parameters) persist between passes, so gradients from several losses can be
accumulated before an optimizer step.

Everything is float64 and strictly two-dimensional.  A "vector" is a 1 x d
row.  The only broadcast supported by `add` is a row bias (1 x d onto n x d);
`mul` additionally broadcasts 1 x 1 scalars.  Anything fancier is rejected
with a :class:`ShapeError` naming both shapes.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-12


# ---------------------------------------------------------------------------
# seeded randomness


@dataclass(frozen=True)
class RngStream:
    """Deterministic, labelled source of random generators.

    Identical (seed, label) pairs always produce bit-identical draw sequences,
    independent of process state.  Labels are hashed with crc32 rather than
    Python's salted `hash` so streams survive interpreter restarts.
    """

    seed: int
    label: str = "root"

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        return np.random.default_rng(
            [self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(self.label.encode("utf-8"))]
        )

    def child(self, label: str) -> "RngStream":
        """Derive a sub-stream; children with distinct labels are independent."""
        return RngStream(self.seed, f"{self.label}/{label}")


# ---------------------------------------------------------------------------
# graph node


class Tensor:
    """Node in the computation graph wrapping a 2D float64 array."""

    __slots__ = ("data", "grad", "parents", "op", "_backward")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2D, got array of shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # operator sugar; all arithmetic lives in module-level functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def const(data, op: str = "const") -> Tensor:
    """Leaf holding fixed data; its gradient is computed but never consumed."""
    return Tensor(data, op=op)


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All nodes reachable from `root`, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into `.grad` of every reachable node.

    The root must be 1x1.  Gradients add onto whatever is already stored, so
    reset leaf gradients between optimizer steps; interior nodes are fresh by
    construction.  Given identical graphs and starting gradients the walk is
    bit-for-bit reproducible.
    """
    if root.data.shape != (1, 1):
        raise ContractError(
            f"backward root must be 1x1, got shape {root.data.shape}"
        )
    order = graph_nodes(root)
    root.grad[0, 0] += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def reset_graph_grads(root: Tensor) -> None:
    """Zero the gradient of every node reachable from `root`."""
    for node in graph_nodes(root):
        node.zero_grad()


# ---------------------------------------------------------------------------
# primitive operations


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1 x d row bias for an n x d left operand."""
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape:
        def bwd(g: np.ndarray) -> None:
            a.grad += g
            b.grad += g
        return Tensor(a.data + b.data, (a, b), bwd, "add")
    if b.shape == (1, a.shape[1]):
        def bwd(g: np.ndarray) -> None:
            a.grad += g
            b.grad += g.sum(axis=0, keepdims=True)
        return Tensor(a.data + b.data, (a, b), bwd, "add_bias")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape:
        def bwd(g: np.ndarray) -> None:
            a.grad += g
            b.grad -= g
        return Tensor(a.data - b.data, (a, b), bwd, "sub")
    if b.shape == (1, a.shape[1]):
        def bwd(g: np.ndarray) -> None:
            a.grad += g
            b.grad -= g.sum(axis=0, keepdims=True)
        return Tensor(a.data - b.data, (a, b), bwd, "sub_bias")
    raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; `b` may also be 1 x 1 (scalar) or 1 x d (row scale)."""
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape:
        def bwd(g: np.ndarray) -> None:
            a.grad += g * b.data
            b.grad += g * a.data
        return Tensor(a.data * b.data, (a, b), bwd, "mul")
    if b.shape == (1, 1):
        def bwd(g: np.ndarray) -> None:
            a.grad += g * b.data[0, 0]
            b.grad[0, 0] += float(np.sum(g * a.data))
        return Tensor(a.data * b.data[0, 0], (a, b), bwd, "mul_scalar")
    if a.shape == (1, 1):
        return mul(b, a)
    if b.shape == (1, a.shape[1]):
        def bwd(g: np.ndarray) -> None:
            a.grad += g * b.data
            b.grad += (g * a.data).sum(axis=0, keepdims=True)
        return Tensor(a.data * b.data, (a, b), bwd, "mul_row")
    raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a.grad += c * g
    return Tensor(a.data * c, (a,), bwd, "scale")


def hadamard_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a fixed array broadcastable to `a` (masks, axis scales)."""
    arr = np.asarray(arr, dtype=np.float64)
    out = a.data * arr
    if out.shape != a.data.shape:
        raise ShapeError(
            f"hadamard_const: multiplier {arr.shape} does not broadcast onto {a.shape}"
        )
    def bwd(g: np.ndarray) -> None:
        a.grad += g * arr
    return Tensor(out, (a,), bwd, "hadamard_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    def bwd(g: np.ndarray) -> None:
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g
    return Tensor(a.data @ b.data, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a.grad += g.T
    return Tensor(a.data.T.copy(), (a,), bwd, "transpose")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: empty input")
    width = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != width:
            raise ShapeError(
                f"concat_rows: widths differ, {p.shape} vs (*, {width})"
            )
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def bwd(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += g[lo:hi]
    return Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty input")
    height = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != height:
            raise ShapeError(
                f"concat_cols: heights differ, {p.shape} vs ({height}, *)"
            )
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def bwd(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += g[:, lo:hi]
    return Tensor(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd, "concat_cols")


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] out of range for {a.shape}")
    def bwd(g: np.ndarray) -> None:
        a.grad[:, lo:hi] += g
    return Tensor(a.data[:, lo:hi].copy(), (a,), bwd, "slice_cols")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ShapeError("gather_rows: empty index list")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ShapeError(
            f"gather_rows: index range [{idx.min()}, {idx.max()}] invalid for {a.shape}"
        )
    def bwd(g: np.ndarray) -> None:
        np.add.at(a.grad, idx, g)
    return Tensor(a.data[idx].copy(), (a,), bwd, "gather_rows")


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a.grad += g[0, 0]
    return Tensor([[float(np.sum(a.data))]], (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    size = a.data.size
    def bwd(g: np.ndarray) -> None:
        a.grad += g[0, 0] / size
    return Tensor([[float(np.mean(a.data))]], (a,), bwd, "mean_all")


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean, returned as a 1 x d row."""
    n = a.shape[0]
    def bwd(g: np.ndarray) -> None:
        a.grad += g / n
    return Tensor(a.data.mean(axis=0, keepdims=True), (a,), bwd, "mean_rows")


def log(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a.grad += g / a.data
    return Tensor(np.log(a.data), (a,), bwd, "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    def bwd(g: np.ndarray) -> None:
        a.grad += g * out
    return Tensor(out, (a,), bwd, "exp")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    def bwd(g: np.ndarray) -> None:
        if p != 0.0:
            a.grad += g * p * a.data ** (p - 1.0)
    return Tensor(out, (a,), bwd, "power")


def absval(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a.grad += g * np.sign(a.data)
    return Tensor(np.abs(a.data), (a,), bwd, "absval")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    def bwd(g: np.ndarray) -> None:
        a.grad += g * inside
    return Tensor(out, (a,), bwd, "clamp")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    def bwd(g: np.ndarray) -> None:
        a.grad += g * (1.0 - t * t)
    return Tensor(t, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    def bwd(g: np.ndarray) -> None:
        a.grad += g * out * (1.0 - out)
    return Tensor(out, (a,), bwd, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    def bwd(g: np.ndarray) -> None:
        a.grad += g * (0.5 * (1.0 + np.tanh(0.5 * a.data)))
    return Tensor(out, (a,), bwd, "softplus")


def rowmax(a: Tensor) -> Tensor:
    """Per-row maximum as an n x 1 column.

    Subgradient goes to the first (lowest-index) maximiser of each row, so
    tied rows still yield a deterministic backward pass.
    """
    idx = np.argmax(a.data, axis=1)
    out = a.data[np.arange(a.shape[0]), idx].reshape(-1, 1)
    def bwd(g: np.ndarray) -> None:
        np.add.at(a.grad, (np.arange(a.shape[0]), idx), g[:, 0])
    return Tensor(out, (a,), bwd, "rowmax")


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    def bwd(g: np.ndarray) -> None:
        a.grad += out * (g - np.sum(g * out, axis=1, keepdims=True))
    return Tensor(out, (a,), bwd, "softmax_rows")


# ---------------------------------------------------------------------------
# composite layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with a row-broadcast bias."""
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input {x.shape} does not match weight {weight.shape}"
        )
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (1, weight.shape[1]):
            raise ShapeError(
                f"linear: bias {bias.shape} does not match weight {weight.shape}"
            )
        out = add(out, bias)
    return out


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise layer normalization with learned gain and shift."""
    n, d = x.shape
    if d < 2:
        raise ShapeError(f"layer_norm: rows need at least 2 entries, got {x.shape}")
    if gain.shape != (1, d) or shift.shape != (1, d):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / shift {shift.shape} do not match input {x.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bwd(g: np.ndarray) -> None:
        gain.grad += np.sum(g * xhat, axis=0, keepdims=True)
        shift.grad += np.sum(g, axis=0, keepdims=True)
        dxhat = g * gain.data
        x.grad += inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
        )

    return Tensor(out, (x, gain, shift), bwd, "layer_norm")


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows of `a` and rows of `b`.

    Entry (j, i) is a_j . b_i / (|a_j| |b_i| + eps), clipped to [-1, 1].  A
    zero row yields zero similarity by convention and contributes no gradient
    through its own norm.
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: widths differ, {a.shape} vs {b.shape}")
    s = a.data @ b.data.T
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    den = na[:, None] * nb[None, :] + COSINE_EPS
    out = np.clip(s / den, -1.0, 1.0)

    na_safe = np.where(na > 0.0, na, 1.0)
    nb_safe = np.where(nb > 0.0, nb, 1.0)
    an = np.where(na[:, None] > 0.0, a.data / na_safe[:, None], 0.0)
    bn = np.where(nb[:, None] > 0.0, b.data / nb_safe[:, None], 0.0)

    def bwd(g: np.ndarray) -> None:
        p = g / den
        q = g * s / (den * den)
        a.grad += p @ b.data - (q * nb[None, :]).sum(axis=1, keepdims=True) * an
        b.grad += p.T @ a.data - (q * na[:, None]).sum(axis=0)[:, None] * bn

    return Tensor(out, (a, b), bwd, "cosine_matrix")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two 1 x d rows as a 1 x 1 tensor."""
    if u.shape[0] != 1 or v.shape[0] != 1:
        raise ShapeError(
            f"cosine_similarity: expects single rows, got {u.shape} and {v.shape}"
        )
    return cosine_matrix(u, v)


@dataclass
class AttentionParams:
    """Projections of one multi-head attention block (no biases)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @staticmethod
    def create(rng: RngStream, dim: int, heads: int) -> "AttentionParams":
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"attention: heads={heads} must divide dim={dim}")
        return AttentionParams(
            wq=uniform_matrix(rng.child("wq"), dim, dim, dim),
            wk=uniform_matrix(rng.child("wk"), dim, dim, dim),
            wv=uniform_matrix(rng.child("wv"), dim, dim, dim),
            wo=uniform_matrix(rng.child("wo"), dim, dim, dim),
            heads=heads,
        )

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
        }


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: AttentionParams,
    bias: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with per-head column splits.

    Scores between projected queries and keys are scaled by 1/sqrt(d/heads),
    normalized per row, and used to mix projected values; head outputs are
    concatenated and sent through the shared output projection.  An optional
    fixed `bias` (n_query x n_key) is added to every head's scores before the
    softmax; it carries no gradient and is how callers inject structural
    preferences such as spatial locality.
    """
    d = query.shape[1]
    if key.shape[1] != d or value.shape[1] != d:
        raise ShapeError(
            f"attention: query {query.shape}, key {key.shape}, value {value.shape} widths differ"
        )
    if key.shape[0] != value.shape[0]:
        raise ShapeError(
            f"attention: key rows {key.shape} != value rows {value.shape}"
        )
    heads = params.heads
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"attention: heads={heads} must divide dim={d}")
    if bias is not None and bias.shape != (query.shape[0], key.shape[0]):
        raise ShapeError(
            f"attention: bias {bias.shape} does not match {query.shape[0]} queries x {key.shape[0]} keys"
        )
    dh = d // heads
    q = matmul(query, params.wq)
    k = matmul(key, params.wk)
    v = matmul(value, params.wv)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qs, ks, vs = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        scores = scale(matmul(qs, transpose(ks)), 1.0 / math.sqrt(dh))
        if bias is not None:
            scores = add(scores, const(bias, "attention_bias"))
        outs.append(matmul(softmax_rows(scores), vs))
    return matmul(concat_cols(outs), params.wo)


def dropout(x: Tensor, rate: float, gen: np.random.Generator) -> Tensor:
    """Inverted dropout; callers apply it only on training passes."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = gen.random(x.shape) >= rate
    return hadamard_const(x, keep / (1.0 - rate))


# ---------------------------------------------------------------------------
# parameter helpers


def uniform_matrix(rng: RngStream, rows: int, cols: int, fan_in: int) -> Tensor:
    """Leaf initialized uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.generator().uniform(-bound, bound, size=(rows, cols)))


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    @staticmethod
    def create(rng: RngStream, d_in: int, d_out: int) -> "LinearParams":
        return LinearParams(
            weight=uniform_matrix(rng.child("weight"), d_in, d_out, d_in),
            bias=uniform_matrix(rng.child("bias"), 1, d_out, d_in),
        )

    def apply(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class LayerNormParams:
    gain: Tensor
    shift: Tensor
    eps: float = LAYER_NORM_EPS

    @staticmethod
    def create(dim: int) -> "LayerNormParams":
        return LayerNormParams(
            gain=Tensor(np.ones((1, dim))), shift=Tensor(np.zeros((1, dim)))
        )

    def apply(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.shift": self.shift}
