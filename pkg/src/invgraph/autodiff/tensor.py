"""Reverse-mode automatic differentiation over dense numpy arrays.

A closed set of primitives is recorded on a Tape; backward() walks the
recorded graph in reverse topological order and accumulates gradients by
summation. Computation is float64 by default (float32 via
set_default_dtype or the INVGRAPH_DTYPE env var).
"""

import os
import threading

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = _DTYPES.get(os.environ.get("INVGRAPH_DTYPE", "float64"), np.float64)

# Division guard: denominators closer to zero than this are an error.
DIV_EPS = 1e-12


def set_default_dtype(name):
    """Select 'float64' (default) or 'float32' for all new tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


class AutodiffError(RuntimeError):
    pass


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


def no_tape_data(t):
    """Raw ndarray of a Tensor or array-like, without touching any tape."""
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=_default_dtype)


class Tape:
    """Ordered record of forward ops; one backward pass per recording.

    Recording is single-worker: tapes are thread-local and may not nest.
    """

    def __init__(self):
        self._ops = []        # parallel lists, indexed by node id
        self._parents = []
        self._backwards = []  # fn(gout) -> tuple of parent grads (or None)
        self._shapes = []
        self.consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise AutodiffError("a tape is already active; tapes do not nest")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def __len__(self):
        return len(self._ops)

    def _add_node(self, kind, parent_ids, backward_fn, shape):
        self._ops.append(kind)
        self._parents.append(parent_ids)
        self._backwards.append(backward_fn)
        self._shapes.append(shape)
        return len(self._ops) - 1

    def watch(self, tensor):
        """Register a requires_grad tensor as a leaf on this tape.

        Watched-but-unused leaves still get (zero) gradients from backward.
        """
        if not tensor.requires_grad:
            raise AutodiffError("watch() requires a requires_grad tensor")
        if tensor._tape is self and tensor._nid is not None:
            return tensor._nid
        nid = self._add_node("leaf", (), None, tensor.data.shape)
        tensor._tape = self
        tensor._nid = nid
        return nid

    def backward(self, loss):
        """Backpropagate from a scalar loss recorded on this tape.

        Returns a dict mapping leaf node id -> gradient Tensor. Leaves never
        touched by the loss get zero gradients.
        """
        if self.consumed:
            raise AutodiffError("tape already consumed; re-record before calling backward again")
        if not isinstance(loss, Tensor):
            raise AutodiffError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.data.shape}")
        if loss._tape is not self or loss._nid is None:
            raise AutodiffError("loss was not recorded on this tape")
        self.consumed = True

        grads = [None] * len(self._ops)
        grads[loss._nid] = np.ones_like(loss.data)
        for nid in range(loss._nid, -1, -1):
            g = grads[nid]
            if g is None or self._ops[nid] == "leaf":
                continue
            parent_grads = self._backwards[nid](g)
            for pid, pg in zip(self._parents[nid], parent_grads):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
            grads[nid] = None  # free as we go

        out = {}
        for nid, kind in enumerate(self._ops):
            if kind == "leaf":
                g = grads[nid]
                if g is None:
                    g = np.zeros(self._shapes[nid], dtype=_default_dtype)
                out[nid] = Tensor(g)
        return out

    def gradients(self, grad_map, tensors):
        """Convenience: pull gradients for specific leaf tensors from a backward() map."""
        out = []
        for t in tensors:
            if t._tape is not self or t._nid is None:
                raise AutodiffError("tensor was not watched on this tape")
            out.append(grad_map[t._nid])
        return out


class Tensor:
    """Dense n-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "_nid")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=_default_dtype)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._nid = None
        if self.requires_grad:
            tape = _active_tape()
            if tape is not None:
                tape.watch(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def node(self):
        """Node id on the tape this tensor was recorded on (None if untracked)."""
        return self._nid

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through forward_primitive
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, kind):
    # sum is a single pass without a bool temp; NaN/Inf both propagate into it
    if not np.isfinite(arr.sum()):
        if np.all(np.isfinite(arr)):  # pathological overflow of the sum itself
            return
        raise AutodiffError(f"non-finite output from op {kind!r}")


def _record(kind, out_data, parents, backward_fn):
    """Wrap op output; register a node when any parent is tracked."""
    _check_finite(out_data, kind)
    tape = _active_tape()
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = None
    out._tape = None
    out._nid = None
    out.requires_grad = False
    if tape is not None:
        tracked = False
        for p in parents:
            if p.requires_grad:
                tracked = True
                break
        if tracked:
            pids = []
            for p in parents:
                if p.requires_grad:
                    if p._tape is not tape or p._nid is None:
                        tape.watch(p)
                    pids.append(p._nid)
                else:
                    pids.append(-1)
            out.requires_grad = True
            out._tape = tape
            out._nid = tape._add_node(kind, tuple(pids), backward_fn, out_data.shape)
    return out


def _unbroadcast(g, shape):
    """Sum-reduce a gradient back to the original (pre-broadcast) shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive forward/backward rules
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return (_unbroadcast(g, ash) if a.requires_grad else None,
                _unbroadcast(g, bsh) if b.requires_grad else None)

    return _record("add", out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return (_unbroadcast(g, ash) if a.requires_grad else None,
                _unbroadcast(-g, bsh) if b.requires_grad else None)

    return _record("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record("mul", out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(np.abs(bd) < DIV_EPS):
        raise AutodiffError(f"div: denominator within {DIV_EPS:g} of zero")
    out = ad / bd

    def bwd(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _record("div", out, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _record("neg", -a.data, (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {ad.shape} x {bd.shape}")
    out = ad @ bd

    def bwd(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record("matmul", out, (a, b), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record("transpose", out, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _record("reshape", out, (a,), bwd)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _record("concat", out, tuple(ts), bwd)


def slice_(a, key):
    a = as_tensor(a)
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=_default_dtype)
    else:
        out = np.ascontiguousarray(out)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=_default_dtype)
        np.add.at(full, key, g)
        return (full,)

    return _record("slice", out, (a,), bwd)


def broadcast(a, shape):
    a = as_tensor(a)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    old = a.data.shape

    def bwd(g):
        return (_unbroadcast(g, old),)

    return _record("broadcast", out, (a,), bwd)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=_default_dtype)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=_default_dtype)
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod([shape[ax] for ax in np.atleast_1d(axis)])

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).copy(),)

    return _record("mean", out, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise AutodiffError("log: input must be strictly positive")
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _record("log", out, (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise AutodiffError("sqrt: negative input")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * np.maximum(out, 1e-300)),)

    return _record("sqrt", out, (a,), bwd)


def sin(a):
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g * np.cos(ad),)

    return _record("sin", np.sin(ad), (a,), bwd)


def cos(a):
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (-g * np.sin(ad),)

    return _record("cos", np.cos(ad), (a,), bwd)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    gate = a.data > 0

    def bwd(g):
        return (g * gate,)

    return _record("relu", out, (a,), bwd)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), bwd)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", out, (a,), bwd)


def gather(a, indices, axis=0):
    """Take rows/elements of `a` along `axis` at integer `indices`.

    Output shape: a.shape[:axis] + indices.shape + a.shape[axis+1:].
    Backward scatter-adds into the source.
    """
    a = as_tensor(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise AutodiffError("gather: indices must be integers")
    out = np.take(a.data, idx, axis=axis)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=_default_dtype)
        if axis == 0:
            gf = g.reshape((idx.size,) + shape[1:])
            flat_idx = idx.ravel()
            if gf.ndim == 2 and gf.shape[1] <= 4:
                # bincount is much faster than ufunc.at for narrow scatters
                for c in range(gf.shape[1]):
                    full[:, c] = np.bincount(flat_idx, weights=gf[:, c],
                                             minlength=shape[0])
            elif gf.ndim == 1:
                full[:] = np.bincount(flat_idx, weights=gf, minlength=shape[0])
            else:
                np.add.at(full, flat_idx, gf)
        else:
            moved = np.moveaxis(g, axis, 0) if idx.ndim == 1 else None
            if moved is None:
                raise AutodiffError("gather: backward for axis != 0 supports 1-D indices only")
            acc = np.moveaxis(full, axis, 0)
            np.add.at(acc, idx, moved)
        return (full,)

    return _record("gather", out, (a,), bwd)


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    gate = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * gate,)

    return _record("clamp", out, (a,), bwd)


def bilinear_sample(tex, uv):
    """Sample a (H, W, C) texture at (..., 2) uv coordinates in [0, 1]^2.

    Coordinates clamp to the texture border (no wraparound). Differentiable
    w.r.t. both the texture and the coordinates.
    """
    tex, uv = as_tensor(tex), as_tensor(uv)
    td, ud = tex.data, uv.data
    if td.ndim != 3:
        raise AutodiffError(f"bilinear_sample: texture must be (H, W, C), got {td.shape}")
    if ud.shape[-1] != 2:
        raise AutodiffError(f"bilinear_sample: uv must end in dim 2, got {ud.shape}")
    H, W, C = td.shape
    flat = ud.reshape(-1, 2)
    x = np.clip(flat[:, 0] * (W - 1), 0.0, W - 1.0)
    y = np.clip(flat[:, 1] * (H - 1), 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]

    t00 = td[y0, x0]
    t01 = td[y0, x1]
    t10 = td[y1, x0]
    t11 = td[y1, x1]
    top = t00 * (1 - fx) + t01 * fx
    bot = t10 * (1 - fx) + t11 * fx
    out = (top * (1 - fy) + bot * fy).reshape(ud.shape[:-1] + (C,))

    in_x = (flat[:, 0] * (W - 1) > 0.0) & (flat[:, 0] * (W - 1) < W - 1.0)
    in_y = (flat[:, 1] * (H - 1) > 0.0) & (flat[:, 1] * (H - 1) < H - 1.0)

    def bwd(g):
        gf = g.reshape(-1, C)
        gtex = None
        if tex.requires_grad:
            gtex = np.zeros_like(td)
            np.add.at(gtex, (y0, x0), gf * ((1 - fx) * (1 - fy)))
            np.add.at(gtex, (y0, x1), gf * (fx * (1 - fy)))
            np.add.at(gtex, (y1, x0), gf * ((1 - fx) * fy))
            np.add.at(gtex, (y1, x1), gf * (fx * fy))
        guv = None
        if uv.requires_grad:
            dx = ((t01 - t00) * (1 - fy) + (t11 - t10) * fy)
            dy = (bot - top)
            gu = (gf * dx).sum(axis=1) * (W - 1) * in_x
            gv = (gf * dy).sum(axis=1) * (H - 1) * in_y
            guv = np.stack([gu, gv], axis=-1).reshape(ud.shape)
        return (gtex, guv)

    return _record("bilinear_sample", out, (tex, uv), bwd)


def conv2d(x, w, stride=1, pad=0):
    """2-D convolution (cross-correlation): x (N,C,H,W) * w (F,C,kH,kW) -> (N,F,H',W')."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise AutodiffError(f"conv2d: incompatible shapes {xd.shape} x {wd.shape}")
    N, C, H, W = xd.shape
    F, _, kH, kW = wd.shape
    Ho = (H + 2 * pad - kH) // stride + 1
    Wo = (W + 2 * pad - kW) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise AutodiffError(f"conv2d: output would be empty for input {xd.shape}, kernel {wd.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    sN, sC, sH, sW = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (N, C, kH, kW, Ho, Wo), (sN, sC, sH, sW, sH * stride, sW * stride))
    out = np.tensordot(cols, wd, axes=([1, 2, 3], [1, 2, 3]))  # (N,Ho,Wo,F)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        gw = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (F,C,kH,kW)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kH):
                for j in range(kW):
                    # (N,F,Ho,Wo) x (F,C) -> (N,C,Ho,Wo) contribution at tap (i,j)
                    contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                    contrib = contrib.transpose(0, 3, 1, 2)
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += contrib
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw)

    return _record("conv2d", out, (x, w), bwd)


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "conv2d": conv2d, "transpose": transpose,
    "reshape": reshape, "concat": concat, "slice": slice_,
    "broadcast": broadcast, "sum": sum_, "mean": mean,
    "exp": exp, "log": log, "sqrt": sqrt, "sin": sin, "cos": cos,
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax,
    "gather": gather, "bilinear_sample": bilinear_sample, "clamp": clamp,
}


def forward_primitive(kind, inputs, attrs=None):
    """Dispatch one forward primitive by name.

    `inputs` is a list of tensors/array-likes; `attrs` carries op attributes
    (stride/pad for conv2d, axis for softmax, ...). Unknown kinds are an error.
    """
    if kind not in _PRIMITIVES:
        raise AutodiffError(f"unknown op kind {kind!r}")
    fn = _PRIMITIVES[kind]
    attrs = attrs or {}
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def op_kinds():
    return sorted(_PRIMITIVES)
