"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a node on a thread-local tape. A call to
:func:`backward` walks that tape once, newest node first, and then clears it.
"""
from __future__ import annotations

import contextlib
import json
import threading
from pathlib import Path

import numpy as np

MASK_FILL = -1e30
CHECKPOINT_MAGIC = b"HVLA-CKPT\n"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


class RankError(ValueError):
    pass


class Tape:
    """Ordered record of operations; inputs always precede outputs."""

    def __init__(self):
        self.nodes = []

    def record(self, out, parents, backward_fn):
        out.node_id = len(self.nodes)
        self.nodes.append((out, parents, backward_fn))

    def clear(self):
        for out, _, _ in self.nodes:
            out.node_id = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        return self.data.reshape(-1)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        get_tape().record(out, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if loss.node_id is None:
        raise RankError("loss is not on the tape (was it computed under no_grad?)")
    loss.grad = np.ones_like(loss.data)
    try:
        for idx in range(loss.node_id, -1, -1):
            out, parents, backward_fn = tape.nodes[idx]
            if out.grad is None:
                continue
            for parent, g in zip(parents, backward_fn(out.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
    finally:
        tape.clear()


def reset_tape():
    get_tape().clear()


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x, lo, hi):
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a, b):
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def gelu(x):
    x = as_tensor(x)
    xd = x.data
    c = np.sqrt(2.0 / np.pi)
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- shape / reduction


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def take_rows(x, index):
    """Select rows of a 2-D tensor (duplicates allowed)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def pick(x, idx):
    """``out[..., i] = x[..., idx[...]]``: gather one entry along the last axis."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    sel = np.expand_dims(idx, -1)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.put_along_axis(out, sel, np.expand_dims(g, -1), axis=-1)
        return (out,)

    return _make(np.take_along_axis(x.data, sel, axis=-1)[..., 0], (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # weight product: fold leading axes into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw2)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(ad @ bd, (a, b), bw)


def embedding(ids, table):
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------- softmax family


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim < 2 or logits.ndim < 2 or mask.shape[-2:] != logits.shape[-2:]:
        raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("attention row with no allowed positions")
    p = _softmax(np.where(mask, logits.data, MASK_FILL))
    p = np.where(mask, p, 0.0)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), bw)


def softmax(x):
    x = as_tensor(x)
    p = _softmax(x.data)
    return _make(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits, targets, loss_mask, weights=None):
    """Mean negative log-likelihood over positions where ``loss_mask`` holds.

    ``logits`` is ``[..., n, V]``; ``targets`` and ``loss_mask`` are ``[..., n]``.
    Optional per-position ``weights`` scale each term; the denominator stays the
    count of supervised positions.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or loss_mask.shape != targets.shape:
        raise ShapeError(
            f"targets {targets.shape} / loss_mask {loss_mask.shape} vs logits {logits.shape}"
        )
    count = int(loss_mask.sum())
    if count == 0:
        raise EmptyLossError("loss_mask selects no positions")
    w = loss_mask.astype(np.float64)
    if weights is not None:
        w = w * np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(loss_mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    value = -(np.where(loss_mask, picked, 0.0) * w).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / count)[..., None],)

    return _make(np.asarray(value), (logits,), bw)


# ---------------------------------------------------------------- optimisation


class Adam:
    """Adam with default moments and optional global-norm clipping."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, grad_clip=None):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad**2).sum()) for p in self.params.values() if p.grad is not None)))

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, tensors, meta=None):
    """Write (name, shape, float64 values) triples behind a versioned header."""
    names = list(tensors)
    arrays = [np.ascontiguousarray(np.asarray(getattr(tensors[n], "data", tensors[n]), dtype="<f8")) for n in names]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "entries": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    body = raw[len(CHECKPOINT_MAGIC):]
    nl = body.index(b"\n")
    header = json.loads(body[:nl])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = nl + 1
    out = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
        out[entry["name"]] = arr
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return out, header["meta"]
