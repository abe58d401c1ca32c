"""Differentiable operations.

Composite transformer pieces (layer norm, GELU, multi-head attention, the
losses) are fused with hand-written backward rules; the generic elementwise and
shape ops cover everything else.
"""
import math

import numpy as np

from .autodiff import ContractError, TensorNode, as_node, make_node


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    a = as_node(a)
    b = as_node(b, dtype=a.dtype) if not isinstance(b, TensorNode) else b
    return a, b


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    out = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.value - b.value

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.value * b.value

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return make_node(out, (a, b), bw)


def scale(a, c):
    """Multiply by a non-differentiated constant scalar."""
    a = as_node(a)
    c = a.value.dtype.type(c)

    def bw(g):
        return (g * c,)

    return make_node(a.value * c, (a,), bw)


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_node(a)
    return make_node(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(x):
    """GELU, tanh approximation."""
    x = as_node(x)
    v = x.value
    k = v.dtype.type(math.sqrt(2.0 / math.pi))
    c = v.dtype.type(0.044715)
    inner = k * (v + c * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = k * (1.0 + 3.0 * c * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make_node(out, (x,), bw)


# -- reductions and shape -----------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_node(a)
    return make_node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_node(a)
    axes = tuple(reversed(range(a.value.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index):
    a = as_node(a)
    out = a.value[index]

    def bw(g):
        full = np.zeros_like(a.value)
        if isinstance(index, np.ndarray) or (
            isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index)
        ):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(np.array(out), (a,), bw)


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    cuts = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(out, tuple(nodes), bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    out = a.value @ b.value

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.value.ndim == 2 and a.value.ndim > 2:
                a2 = a.value.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return make_node(out, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``."""
    x = as_node(x)
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, x.shape[-1])
    out = x2 @ weight.value
    if bias is not None:
        out = out + bias.value
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.value.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, weight, bias), bw)


# -- normalisation and softmax ------------------------------------------------

def softmax(a, axis=-1):
    a = as_node(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_node(a)
    m = a.value.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    out = a.value - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), bw)


def layer_norm(x, weight, bias, eps=1e-6):
    x = as_node(x)
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + v.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * weight.value + bias.value

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * weight.value
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead) if weight.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, weight, bias), bw)


def l2_normalize(x, eps=1e-12):
    x = as_node(x)
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True)) + x.dtype.type(eps)
    out = x.value / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return make_node(out, (x,), bw)


def attention(qkv, heads, query_index=None):
    """Fused multi-head scaled dot-product self-attention.

    Args:
        qkv: (B, T, 3d) node holding concatenated queries, keys and values.
        heads: number of heads; d must be divisible by it.
        query_index: if given, only that token's query is evaluated and the
            output is (B, 1, d). Keys and values still span all tokens.

    Returns:
        (B, T, d) node (or (B, 1, d) with ``query_index``).
    """
    qkv = as_node(qkv)
    B, T, three_d = qkv.shape
    d = three_d // 3
    if d % heads:
        raise ContractError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    sc = qkv.dtype.type(1.0 / math.sqrt(dh))
    hv = qkv.value.reshape(B, T, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # 3,B,h,T,dh
    q, k, v = hv[0], hv[1], hv[2]
    if query_index is not None:
        q = q[:, :, query_index:query_index + 1]
    s = (q @ k.transpose(0, 1, 3, 2)) * sc
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    o = p @ v  # B,h,Tq,dh
    tq = o.shape[2]
    out = o.transpose(0, 2, 1, 3).reshape(B, tq, d)

    def bw(g):
        go = g.reshape(B, tq, heads, dh).transpose(0, 2, 1, 3)
        gp = go @ v.transpose(0, 1, 3, 2)
        gv = p.transpose(0, 1, 3, 2) @ go
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= sc
        gk = gs.transpose(0, 1, 3, 2) @ q
        gq_part = gs @ k
        ghv = np.empty((3, B, heads, T, dh), dtype=g.dtype)
        if query_index is None:
            ghv[0] = gq_part
        else:
            ghv[0] = 0.0
            ghv[0][:, :, query_index:query_index + 1] = gq_part
        ghv[1] = gk
        ghv[2] = gv
        return (ghv.transpose(1, 3, 0, 2, 4).reshape(B, T, three_d),)

    return make_node(out, (qkv,), bw)


# -- losses -------------------------------------------------------------------

def cross_entropy(logits, labels, smoothing=0.0):
    """Mean cross-entropy of ``softmax(logits)`` against integer labels.

    With ``smoothing`` the target is ``(1-smoothing)·onehot + smoothing/C``.
    """
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ContractError(f"labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    v = logits.value
    m = v.max(axis=1, keepdims=True)
    logp = v - (m + np.log(np.exp(v - m).sum(axis=1, keepdims=True)))
    rows = np.arange(B)
    nll = -logp[rows, labels]
    if smoothing:
        eps = v.dtype.type(smoothing)
        loss = ((1.0 - eps) * nll - eps * logp.mean(axis=1)).mean()
    else:
        loss = nll.mean()

    def bw(g):
        target = np.zeros_like(v)
        if smoothing:
            target += eps / C
            target[rows, labels] += 1.0 - eps
        else:
            target[rows, labels] = 1.0
        return ((np.exp(logp) - target) * (g / B),)

    return make_node(np.asarray(loss, dtype=v.dtype), (logits,), bw)


def clip_loss(pred, target):
    """Symmetric InfoNCE on raw inner products, no temperature.

    ``mean_j[lse_k <p_j,t_k> - <p_j,t_j>] + mean_j[lse_k <p_k,t_j> - <p_j,t_j>]``
    with log-sum-exp evaluated stably.
    """
    pred = as_node(pred)
    target = as_node(target, dtype=pred.dtype) if not isinstance(target, TensorNode) else target
    P, T = pred.value, target.value
    if P.shape != T.shape or P.ndim != 2:
        raise ContractError(f"pred {P.shape} and target {T.shape} must be equal (B, d)")
    B = P.shape[0]
    s = P @ T.T
    if not np.isfinite(s).all():
        raise FloatingPointError("non-finite inner product in alignment loss")
    diag = np.diagonal(s)
    mr = s.max(axis=1, keepdims=True)
    er = np.exp(s - mr)
    lse_r = mr[:, 0] + np.log(er.sum(axis=1))
    mc = s.max(axis=0, keepdims=True)
    ec = np.exp(s - mc)
    lse_c = mc[0] + np.log(ec.sum(axis=0))
    loss = (lse_r - diag).mean() + (lse_c - diag).mean()

    def bw(g):
        gs = er / er.sum(axis=1, keepdims=True) + ec / ec.sum(axis=0, keepdims=True)
        gs[np.diag_indices(B)] -= 2.0
        gs *= g / B
        gp = gs @ T if pred.requires_grad else None
        gt = gs.T @ P if target.requires_grad else None
        return gp, gt

    return make_node(np.asarray(loss, dtype=P.dtype), (pred, target), bw)
