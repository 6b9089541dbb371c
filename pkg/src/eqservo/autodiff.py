"""Reverse-mode automatic differentiation over dense numpy tensors.

Each operation returns a new Tensor that remembers its parents and a closure
propagating upstream gradients, so the set of live Tensors forms an acyclic
graph in creation (topological) order with cached forward values.  backward()
walks that graph once in reverse.

Supported node kinds: add, mul, matmul, conv2d, relu, reshape, concat,
reduce_sum, mse, abs, plus sqrt/reciprocal/sub/scale conveniences built the
same way.  float32 is the training precision; gradient checks run in float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        """Accumulate gradients of this scalar into every requires_grad leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.data.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, parents=(a, b), op="add")

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = back
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data, parents=(a, b), op="mul")

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = back
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data, parents=(a, b), op="sub")

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = back
    return out


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = a.data.dtype.type(c)
    out = Tensor(a.data * c, parents=(a,), op="scale")

    def back(g):
        _accum(a, g * c)

    out._backward = back
    return out


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes {a.data.shape} x {b.data.shape} do not align")
    out = Tensor(a.data @ b.data, parents=(a, b), op="matmul")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out._backward = back
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0), parents=(a,), op="relu")

    def back(g):
        # Subgradient at 0 is 0 (strict inequality).
        _accum(a, g * (out.data > 0))

    out._backward = back
    return out


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.reshape(shape), parents=(a,), op="reshape")

    def back(g):
        _accum(a, g.reshape(a.data.shape))

    out._backward = back
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors), op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    out._backward = back
    return out


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), op="reduce_sum")

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out._backward = back
    return out


def mse(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    diff = a.data - b.data
    out = Tensor(np.asarray((diff**2).mean(), dtype=a.data.dtype), parents=(a, b), op="mse")
    n = diff.size

    def back(g):
        base = (2.0 / n) * diff * g
        _accum(a, base)
        _accum(b, -base)

    out._backward = back
    return out


def absolute(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.abs(a.data), parents=(a,), op="abs")

    def back(g):
        _accum(a, g * np.sign(a.data))

    out._backward = back
    return out


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.sqrt(a.data), parents=(a,), op="sqrt")

    def back(g):
        _accum(a, g * 0.5 / np.maximum(out.data, 1e-12))

    out._backward = back
    return out


def reciprocal(a) -> Tensor:
    a = _lift(a)
    out = Tensor(1.0 / a.data, parents=(a,), op="reciprocal")

    def back(g):
        _accum(a, -g * out.data * out.data)

    out._backward = back
    return out


def _im2col(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NCHW input (B,C,H,W) with filters (F,C,kh,kw)."""
    x, w = _lift(x), _lift(w)
    b, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, filters {cw}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d output would be empty")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out_data = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # (B,OH,OW,F)
    out = Tensor(np.ascontiguousarray(out_data.transpose(0, 3, 1, 2)), parents=(x, w), op="conv2d")

    def back(g):
        g_bhwf = g.transpose(0, 2, 3, 1)
        if w.requires_grad:
            gw = np.tensordot(g_bhwf, cols, axes=([0, 1, 2], [0, 4, 5]))  # (F,C,kh,kw)
            _accum(w, gw)
        if x.requires_grad:
            # (B,OH,OW,F) x (F,C,kh,kw) -> (B,OH,OW,C,kh,kw)
            dcols = np.tensordot(g_bhwf, w.data, axes=([3], [0]))
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
            _accum(x, dxp)

    out._backward = back
    return out


def gradients(loss: Tensor, params: dict) -> dict:
    """Backward pass returning one gradient array per named parameter.

    Parameters the loss does not reach get zero gradients.
    """
    loss.backward()
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()
    }


def finite_diff_check(fn, params: dict, eps: float = 1e-6) -> float:
    """Worst relative error between autodiff and central finite differences.

    fn maps a dict of named Tensors to a scalar Tensor.  Denominators are
    clamped at 1e-8 so zero gradients compare cleanly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tensors = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    loss = fn(tensors)
    analytic = gradients(loss, tensors)
    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            for sign in (+1.0, -1.0):
                probe = flat.copy()
                probe[i] += sign * eps
                tensors[name] = Tensor(probe.reshape(base.shape))
                if sign > 0:
                    f_plus = fn(tensors).item()
                else:
                    f_minus = fn(tensors).item()
            tensors[name] = Tensor(base)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ------------------------------------------------------------------ optimizers


@dataclass
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.0


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer_state(params: dict, config) -> dict:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    if isinstance(config, AdamConfig):
        return {"step": 0, "m": zeros, "v": {k: np.zeros_like(v) for k, v in params.items()}}
    return {"velocity": zeros}


def optimizer_step(params: dict, grads: dict, state: dict, config) -> None:
    """One in-place update of every parameter; deterministic given state."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    if isinstance(config, AdamConfig):
        state["step"] += 1
        t = state["step"]
        b1, b2 = config.beta1, config.beta2
        for name, p in params.items():
            g = grads[name]
            m = state["m"][name]
            v = state["v"][name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p -= (config.lr * mhat / (np.sqrt(vhat) + config.eps)).astype(p.dtype, copy=False)
    elif isinstance(config, SGDConfig):
        for name, p in params.items():
            vel = state["velocity"][name]
            vel *= config.momentum
            vel += grads[name]
            p -= (config.lr * vel).astype(p.dtype, copy=False)
    else:
        raise ValueError(f"unknown optimizer config {type(config).__name__}")


# ------------------------------------------------------------------ checkpoint

_CKPT_MAGIC = b"EQCK"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named float32 tensor blobs with a JSON header."""
    names = list(params.keys())
    header = {
        "version": _CKPT_VERSION,
        "meta": dict(meta or {}),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read back (params, meta); raises CheckpointError on bad format/version."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated tensor {spec['name']!r}")
            params[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return params, header["meta"]


def params_digest(params: dict) -> str:
    """Stable content hash over named tensors, for determinism checks."""
    h = hashlib.sha256()
    for name in sorted(params.keys()):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]
