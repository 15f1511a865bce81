"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends one node to a linear tape; append
order is topological order by construction, so the backward pass is a
single reversed sweep.  Tensors without a grad requirement never touch the
tape, which means frozen submodules cost nothing during training.

Design constraints:
  * float64 everywhere, no broadcasting beyond bias-add,
  * multi-head attention is a single fused tape node with a hand-derived
    vjp (checked against finite differences in the test suite),
  * the tape is consumed by ``backward``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to an op do not meet its contract."""


class ContractError(ValueError):
    """An op precondition (other than shape arithmetic) was violated."""


class NumericalError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Tape:
    """Ordered record of differentiable ops with parent references."""

    __slots__ = ("nodes", "enabled")

    def __init__(self):
        self.nodes = []
        self.enabled = True

    def record(self, out, parents, vjp):
        self.nodes.append((out, parents, vjp))

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()
_CHECK_FINITE = True


def active_tape() -> Tape:
    return _TAPE


def set_finite_checks(flag: bool) -> bool:
    """Toggle per-op NaN/Inf verification; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(flag)
    return previous


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / frozen paths)."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(rng: np.random.Generator, shape, std: float = 0.02,
              trainable: bool = True) -> Tensor:
    """Seeded Gaussian parameter tensor."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=trainable)


def zeros(shape, trainable: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=trainable)


def ones(shape, trainable: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=trainable)


def _make(data, parents, vjp) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError("forward op produced non-finite values")
    rg = _TAPE.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        _TAPE.record(out, parents, vjp)
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Populate grads of every requires_grad ancestor of ``loss``.

    ``loss`` must be a scalar on the tape; the tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to the tape")
    loss.grad = np.ones_like(loss.data)
    for out, parents, vjp in reversed(_TAPE.nodes):
        g = out.grad
        if g is None:
            continue
        vjp(g)
    _TAPE.reset()


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")

    def vjp(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; the only broadcast in the library."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias shape {b.shape} does not match {x.shape}")

    def vjp(g):
        _acc(x, g)
        _acc(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")

    def vjp(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    def vjp(g):
        _acc(x, -g)

    return _make(-x.data, (x,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def vjp(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(a.data * b.data, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        _acc(x, g * c)

    return _make(x.data * c, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def vjp(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x."""
    if x.ndim != 2 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"linear shapes inconsistent: x{x.shape} w{w.shape} b{b.shape}")

    def vjp(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g):
        _acc(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")

    def vjp(g):
        _acc(x, g.T)

    return _make(x.data.T, (x,), vjp)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        _acc(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), vjp)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def row_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    def vjp(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[lo:hi] = g
            _acc(x, buf)

    return _make(x.data[lo:hi].copy(), (x,), vjp)


def col_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    def vjp(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, lo:hi] = g
            _acc(x, buf)

    return _make(x.data[:, lo:hi].copy(), (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        _acc(x, np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def vjp(g):
        _acc(x, np.full_like(x.data, float(g) / n))

    return _make(np.asarray(x.data.mean()), (x,), vjp)


# ---------------------------------------------------------------------------
# nonlinear ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if x.requires_grad:
            _acc(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        if x.requires_grad:
            _acc(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row zero mean / unit variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match d={d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        _acc(gain, (g * xhat).sum(axis=lead))
        _acc(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            dx = (gx - gx.mean(axis=-1, keepdims=True)
                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * inv
            _acc(x, dx)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximate GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            _acc(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du))

    return _make(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))

    def vjp(g):
        if x.requires_grad:
            _acc(x, g * s * (1.0 - s))

    return _make(s, (x,), vjp)


def embed_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embed_rows needs a 1-D id list, got {ids.shape}")

    def vjp(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            _acc(table, buf)

    return _make(table.data[ids].copy(), (table,), vjp)


def gather_cols(x: Tensor, idx) -> Tensor:
    """Pick x[i, idx[i]] for each row; returns a vector."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.shape != (n,):
        raise DimensionError(f"gather_cols index shape {idx.shape} != ({n},)")
    rows = np.arange(n)

    def vjp(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[rows, idx] = g
            _acc(x, buf)

    return _make(x.data[rows, idx].copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# fused multi-head attention


@dataclass
class AttentionParams:
    """Projection weights for one attention layer (d_model -> d_internal)."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self):
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo}

    @property
    def d_internal(self) -> int:
        return self.wq.shape[1]

    @staticmethod
    def count(d_model: int, d_internal: int) -> int:
        return 3 * (d_model * d_internal + d_internal) + d_internal * d_model + d_model


def attention_params(rng: np.random.Generator, d_model: int, d_internal: int,
                     std: float = 0.02, trainable: bool = True) -> AttentionParams:
    def p(*shape):
        return parameter(rng, shape, std=std, trainable=trainable)

    def z(*shape):
        return Tensor(np.zeros(shape), requires_grad=trainable)

    return AttentionParams(
        wq=p(d_model, d_internal), bq=z(d_internal),
        wk=p(d_model, d_internal), bk=z(d_internal),
        wv=p(d_model, d_internal), bv=z(d_internal),
        wo=p(d_internal, d_model), bo=z(d_model),
    )


def mha(params: AttentionParams, queries: Tensor, keys: Tensor, values: Tensor,
        heads: int, causal: bool = False) -> Tensor:
    """Scaled dot-product multi-head attention, one fused tape node.

    Projects q/k/v to d_internal, splits into ``heads``, attends with scale
    1/sqrt(d_internal/heads), concatenates heads and projects back to d_model.
    d_model need not be divisible by heads; d_internal must be.  With
    ``causal`` (square attention only) position i attends to positions <= i.
    """
    di = params.d_internal
    if di % heads != 0:
        raise ContractError(f"d_internal {di} not divisible by heads {heads}")
    if queries.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise DimensionError("mha operands must be 2-D token matrices")
    if keys.shape[0] != values.shape[0]:
        raise DimensionError(
            f"keys/values row counts differ: {keys.shape} vs {values.shape}")
    d = queries.shape[1]
    if keys.shape[1] != d or values.shape[1] != d or params.wq.shape[0] != d:
        raise DimensionError("mha token width does not match projection weights")

    dh = di // heads
    alpha = 1.0 / math.sqrt(dh)
    nq, nk = queries.shape[0], keys.shape[0]

    q = queries.data @ params.wq.data + params.bq.data
    k = keys.data @ params.wk.data + params.bk.data
    v = values.data @ params.wv.data + params.bv.data
    qh = q.reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(nk, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(nk, heads, dh).transpose(1, 0, 2)
    scores = alpha * (qh @ kh.transpose(0, 2, 1))
    if causal:
        if nq != nk:
            raise ContractError("causal attention requires square token counts")
        scores = scores + np.triu(np.full((nq, nk), -1e30), k=1)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    oh = attn @ vh
    o = oh.transpose(1, 0, 2).reshape(nq, di)
    out = o @ params.wo.data + params.bo.data

    def vjp(g):
        _acc(params.wo, o.T @ g)
        _acc(params.bo, g.sum(axis=0))
        go = (g @ params.wo.data.T).reshape(nq, heads, dh).transpose(1, 0, 2)
        ga = go @ vh.transpose(0, 2, 1)
        gvh = attn.transpose(0, 2, 1) @ go
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True))
        gqh = alpha * (gs @ kh)
        gkh = alpha * (gs.transpose(0, 2, 1) @ qh)
        gq = gqh.transpose(1, 0, 2).reshape(nq, di)
        gk = gkh.transpose(1, 0, 2).reshape(nk, di)
        gv = gvh.transpose(1, 0, 2).reshape(nk, di)
        _acc(params.wq, queries.data.T @ gq)
        _acc(params.bq, gq.sum(axis=0))
        _acc(params.wk, keys.data.T @ gk)
        _acc(params.bk, gk.sum(axis=0))
        _acc(params.wv, values.data.T @ gv)
        _acc(params.bv, gv.sum(axis=0))
        _acc(queries, gq @ params.wq.data.T)
        _acc(keys, gk @ params.wk.data.T)
        _acc(values, gv @ params.wv.data.T)

    parents = (queries, keys, values, params.wq, params.bq, params.wk, params.bk,
               params.wv, params.bv, params.wo, params.bo)
    return _make(out, parents, vjp)
