"""Differentiable primitives.

Every op validates shapes up front, computes its value with plain
numpy, and registers a vector-Jacobian closure for backward.  The set
is fixed; models compose these and nothing else, which keeps the
finite-difference check (gradcheck.py) exhaustive over the surface the
models actually use.
"""

from __future__ import annotations

import numpy as np

from ..errors import InputError
from .tensor import Tensor, make_node

_LN_EPS = 1e-5
_CAUSAL_MASKS: dict[int, np.ndarray] = {}


def _need_tensor(x, name: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise InputError(f"{name} must be a Tensor, got {type(x).__name__}")
    return x


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_tensor(a, "a"), _need_tensor(b, "b")
    if a.data.shape != b.data.shape:
        raise InputError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def vjp(g):
        return [(a, g), (b, g)]

    return make_node(out, (a, b), vjp)


def add_n(terms) -> Tensor:
    terms = list(terms)
    if not terms:
        raise InputError("add_n needs at least one term")
    shape = terms[0].data.shape
    for t in terms:
        _need_tensor(t, "term")
        if t.data.shape != shape:
            raise InputError("add_n shape mismatch")
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data

    def vjp(g):
        return [(t, g) for t in terms]

    return make_node(out, tuple(terms), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    _need_tensor(x, "x")
    s = float(s)
    out = x.data * s

    def vjp(g):
        return [(x, g * s)]

    return make_node(out, (x,), vjp)


def add_const(x: Tensor, c: float) -> Tensor:
    _need_tensor(x, "x")
    out = x.data + float(c)

    def vjp(g):
        return [(x, g)]

    return make_node(out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    _need_tensor(x, "x")
    out = np.exp(x.data)

    def vjp(g):
        return [(x, g * out)]

    return make_node(out, (x,), vjp)


def expm1(x: Tensor) -> Tensor:
    """exp(x) - 1, accurate near zero.  Key property: the float result
    is always >= x, so expm1(d) - d is exactly nonnegative."""
    _need_tensor(x, "x")
    out = np.expm1(x.data)

    def vjp(g):
        return [(x, g * np.exp(x.data))]

    return make_node(out, (x,), vjp)


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    _need_tensor(x, "x")
    floor = float(floor)
    mask = x.data > floor
    out = np.where(mask, x.data, floor)

    def vjp(g):
        return [(x, g * mask)]

    return make_node(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    _need_tensor(x, "x")
    mask = x.data > 0.0
    out = x.data * mask

    def vjp(g):
        return [(x, g * mask)]

    return make_node(out, (x,), vjp)


def concat_vec(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise InputError("concat_vec needs at least one part")
    for p in parts:
        _need_tensor(p, "part")
        if p.data.ndim != 1:
            raise InputError("concat_vec expects 1-D parts")
    out = np.concatenate([p.data for p in parts])
    sizes = [p.data.shape[0] for p in parts]

    def vjp(g):
        grads = []
        off = 0
        for p, n in zip(parts, sizes):
            grads.append((p, g[off:off + n]))
            off += n
        return grads

    return make_node(out, tuple(parts), vjp)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise InputError("concat_rows needs at least one part")
    width = None
    for p in parts:
        _need_tensor(p, "part")
        if p.data.ndim != 2:
            raise InputError("concat_rows expects 2-D parts")
        if width is None:
            width = p.data.shape[1]
        elif p.data.shape[1] != width:
            raise InputError("concat_rows width mismatch")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def vjp(g):
        grads = []
        off = 0
        for p, n in zip(parts, sizes):
            grads.append((p, g[off:off + n]))
            off += n
        return grads

    return make_node(out, tuple(parts), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    _need_tensor(x, "x")
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    orig = x.data.shape

    def vjp(g):
        return [(x, g.reshape(orig))]

    return make_node(out, (x,), vjp)


def _check_indices(indices, n_rows: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise InputError("indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise InputError(
            f"index out of range: valid [0, {n_rows}), got "
            f"[{idx.min()}, {idx.max()}]")
    return idx


def take_rows(x: Tensor, indices) -> Tensor:
    _need_tensor(x, "x")
    if x.data.ndim != 2:
        raise InputError("take_rows expects a 2-D tensor")
    idx = _check_indices(indices, x.data.shape[0])
    out = x.data[idx]

    def vjp(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return [(x, z)]

    return make_node(out, (x,), vjp)


def take_row(x: Tensor, index: int) -> Tensor:
    """Single row as a 1-D tensor."""
    _need_tensor(x, "x")
    if x.data.ndim != 2:
        raise InputError("take_row expects a 2-D tensor")
    i = int(index)
    if not 0 <= i < x.data.shape[0]:
        raise InputError(f"row {i} out of range [0, {x.data.shape[0]})")
    out = x.data[i]

    def vjp(g):
        z = np.zeros_like(x.data)
        z[i] = g
        return [(x, z)]

    return make_node(out, (x,), vjp)


def embed_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of an embedding table; grads scatter-add back."""
    return take_rows(table, indices)


def pick(x: Tensor, index: int) -> Tensor:
    """One element of a 1-D tensor as a scalar."""
    _need_tensor(x, "x")
    if x.data.ndim != 1:
        raise InputError("pick expects a 1-D tensor")
    i = int(index)
    if not 0 <= i < x.data.shape[0]:
        raise InputError(f"element {i} out of range [0, {x.data.shape[0]})")
    out = np.asarray(x.data[i])

    def vjp(g):
        z = np.zeros_like(x.data)
        z[i] = g
        return [(x, z)]

    return make_node(out, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_tensor(a, "a"), _need_tensor(b, "b")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise InputError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise InputError(f"matmul inner dim mismatch {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return make_node(out, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias.  x may be [n, d_in] or a single [d_in] vector."""
    _need_tensor(x, "x"), _need_tensor(weight, "weight"), _need_tensor(bias, "bias")
    if weight.data.ndim != 2 or bias.data.ndim != 1:
        raise InputError("linear expects 2-D weight and 1-D bias")
    d_in, d_out = weight.data.shape
    if bias.data.shape[0] != d_out:
        raise InputError("linear bias width mismatch")
    if x.data.ndim == 1:
        if x.data.shape[0] != d_in:
            raise InputError(f"linear input dim {x.data.shape[0]} != {d_in}")
        out = x.data @ weight.data + bias.data

        def vjp(g):
            return [(x, g @ weight.data.T),
                    (weight, np.outer(x.data, g)),
                    (bias, g)]

        return make_node(out, (x, weight, bias), vjp)
    if x.data.ndim == 2:
        if x.data.shape[1] != d_in:
            raise InputError(f"linear input dim {x.data.shape[1]} != {d_in}")
        out = x.data @ weight.data + bias.data

        def vjp(g):
            return [(x, g @ weight.data.T),
                    (weight, x.data.T @ g),
                    (bias, g.sum(axis=0))]

        return make_node(out, (x, weight, bias), vjp)
    raise InputError("linear expects 1-D or 2-D input")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _need_tensor(x, "x"), _need_tensor(gain, "gain"), _need_tensor(bias, "bias")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise InputError("layer_norm gain/bias must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * ivar
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def vjp(g):
        dxhat = g * gain.data
        dvar = np.sum(dxhat * centered, axis=-1, keepdims=True) * (-0.5) * ivar ** 3
        dmu = np.sum(-dxhat * ivar, axis=-1, keepdims=True) \
            + dvar * np.mean(-2.0 * centered, axis=-1, keepdims=True)
        dx = dxhat * ivar + dvar * (2.0 / d) * centered + dmu / d
        dgain = np.sum(g * xhat, axis=lead) if lead else g * xhat
        dbias = np.sum(g, axis=lead) if lead else g
        return [(x, dx), (gain, dgain), (bias, dbias)]

    return make_node(out, (x, gain, bias), vjp)


def _causal_mask(t: int) -> np.ndarray:
    mask = _CAUSAL_MASKS.get(t)
    if mask is None:
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        _CAUSAL_MASKS[t] = mask
    return mask


def causal_self_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    q, k, v: [T, d] projected inputs.  Position i attends to j <= i.
    """
    _need_tensor(q, "q"), _need_tensor(k, "k"), _need_tensor(v, "v")
    if q.data.ndim != 2 or q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise InputError("causal_self_attention expects matching [T, d] q/k/v")
    t, d = q.data.shape
    h = int(n_heads)
    if h < 1 or d % h != 0:
        raise InputError(f"model dim {d} not divisible by {h} heads")
    dh = d // h
    inv = 1.0 / np.sqrt(dh)

    def split(a):
        return a.reshape(t, h, dh).transpose(1, 0, 2)  # [h, t, dh]

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * inv
    scores[:, _causal_mask(t)] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    expd = np.exp(scores)
    attn = expd / expd.sum(axis=-1, keepdims=True)
    ctx = np.matmul(attn, vh)  # [h, t, dh]
    out = ctx.transpose(1, 0, 2).reshape(t, d)

    def vjp(g):
        gh = g.reshape(t, h, dh).transpose(1, 0, 2)
        dattn = np.matmul(gh, vh.transpose(0, 2, 1))
        dvh = np.matmul(attn.transpose(0, 2, 1), gh)
        tmp = dattn * attn
        ds = tmp - attn * tmp.sum(axis=-1, keepdims=True)
        dqh = np.matmul(ds, kh) * inv
        dkh = np.matmul(ds.transpose(0, 2, 1), qh) * inv

        def merge(a):
            return a.transpose(1, 0, 2).reshape(t, d)

        return [(q, merge(dqh)), (k, merge(dkh)), (v, merge(dvh))]

    return make_node(out, (q, k, v), vjp)


def attention_pool(query: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Single-query softmax attention: weights = softmax(keys . query / sqrt(d))."""
    _need_tensor(query, "query"), _need_tensor(keys, "keys"), _need_tensor(values, "values")
    if query.data.ndim != 1 or keys.data.ndim != 2 or values.data.ndim != 2:
        raise InputError("attention_pool expects query [d], keys/values [n, d]")
    n, d = keys.data.shape
    if n < 1:
        raise InputError("attention_pool needs at least one key")
    if query.data.shape[0] != d or values.data.shape != (n, d):
        raise InputError("attention_pool shape mismatch")
    inv = 1.0 / np.sqrt(d)
    scores = keys.data @ query.data * inv
    scores = scores - scores.max()
    expd = np.exp(scores)
    weights = expd / expd.sum()
    out = weights @ values.data

    def vjp(g):
        dw = values.data @ g
        tmp = dw * weights
        ds = tmp - weights * tmp.sum()
        dquery = keys.data.T @ ds * inv
        dkeys = np.outer(ds, query.data) * inv
        dvalues = np.outer(weights, g)
        return [(query, dquery), (keys, dkeys), (values, dvalues)]

    return make_node(out, (query, keys, values), vjp)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """CE of a single K-way decision.  Gradient is softmax - one_hot."""
    _need_tensor(logits, "logits")
    if logits.data.ndim != 1:
        raise InputError("softmax_cross_entropy expects 1-D logits")
    k = logits.data.shape[0]
    t = int(target)
    if not 0 <= t < k:
        raise InputError(f"target {t} out of range [0, {k})")
    if not np.isfinite(logits.data).all():
        raise InputError("non-finite logits")
    m = logits.data.max()
    z = logits.data - m
    lse = np.log(np.exp(z).sum())
    out = lse - z[t]

    def vjp(g):
        soft = np.exp(z - lse)
        soft[t] -= 1.0
        return [(logits, soft * g)]

    return make_node(out, (logits,), vjp)


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    """Plain-array log-softmax along the last axis (no graph).

    Shares the arithmetic of softmax_cross_entropy so that
    log P[target] == -CE bit for bit.
    """
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse


def sigmoid_bce(logit: Tensor, label: int) -> Tensor:
    """Binary cross-entropy on one logit, label in {0, 1}."""
    _need_tensor(logit, "logit")
    if logit.data.ndim != 0:
        raise InputError("sigmoid_bce expects a scalar logit")
    y = int(label)
    if y not in (0, 1):
        raise InputError(f"label must be 0 or 1, got {label}")
    x = float(logit.data)
    if not np.isfinite(x):
        raise InputError("non-finite logit")
    # stable: max(x,0) - x*y + log(1 + exp(-|x|))
    out = max(x, 0.0) - x * y + np.log1p(np.exp(-abs(x)))

    def vjp(g):
        if x >= 0:
            sig = 1.0 / (1.0 + np.exp(-x))
        else:
            e = np.exp(x)
            sig = e / (1.0 + e)
        return [(logit, np.asarray((sig - y) * g))]

    return make_node(np.asarray(out), (logit,), vjp)


def sigmoid_value(x: float) -> float:
    if x >= 0:
        return float(1.0 / (1.0 + np.exp(-x)))
    e = np.exp(x)
    return float(e / (1.0 + e))
