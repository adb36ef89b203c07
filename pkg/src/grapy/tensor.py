"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Ops compute with numpy (hot kernels may be numba-jitted, see kernels.py).
When a Tape is active and an input requires gradients, the op appends a
backward rule to the tape. With no active tape the identical arithmetic runs
tape-free, bitwise equal to the recorded path; finite-difference checks rely
on that.

Every op output is checked finite; NaN/Inf raises NumericsError immediately.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an op precondition."""


class NumericsError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


_DTYPE = np.float64  # 64-bit is the test/gradcheck mode; training may use 32-bit


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"precision must be float32 or float64, got {dt}")
    _DTYPE = dt.type


def get_default_dtype():
    return _DTYPE


class precision:
    """Context manager pinning the default dtype: precision('f64') or ('f32')."""

    _NAMES = {"f32": np.float32, "f64": np.float64}

    def __init__(self, name: str):
        if name not in self._NAMES:
            raise ValueError(f"precision mode must be one of {tuple(self._NAMES)}, got {name!r}")
        self._dtype = self._NAMES[name]

    def __enter__(self):
        self._saved = get_default_dtype()
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


class Tensor:
    """A dense real array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


_ACTIVE: "Tape | None" = None


class Tape:
    """Ordered record of operations; single owner, one active at a time.

    Entries are appended in execution order, so every op's inputs precede it.
    ``backward`` walks the record once in reverse and returns gradients for
    every requires_grad leaf reachable from the loss.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active; tapes are single-owner")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate dloss/dleaf into ``.grad`` of every requires_grad leaf.

        Returns the gradient map {leaf tensor: gradient array}. Repeated calls
        without zeroing grads accumulate.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), loss.data.dtype)}
        by_id: dict[int, Tensor] = {}
        produced = {id(out) for out, _, _ in self._entries}
        for out, inputs, back in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, ig in zip(inputs, back(g)):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    by_id[key] = t
        result: dict[Tensor, np.ndarray] = {}
        for key, g in grads.items():
            t = by_id.get(key)
            if t is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            result[t] = g
        return result


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{opname} produced non-finite values")


def _apply(opname: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], back) -> Tensor:
    _check_finite(out_data, opname)
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _ACTIVE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._entries.append((out, inputs, back))
    return out


# ---------------------------------------------------------------------------
# Elementwise ops with size-1 broadcasting (equal ranks only)
# ---------------------------------------------------------------------------

def _broadcast_check(sa: tuple, sb: tuple, opname: str) -> None:
    if len(sa) != len(sb) or any(a != b and a != 1 and b != 1 for a, b in zip(sa, sb)):
        raise ShapeError(f"{opname}: shapes {sa} and {sb} are not broadcastable "
                         "(equal rank, dims equal or 1)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _elementwise(opname, a, b, fwd, back_a, back_b):
    _broadcast_check(a.shape, b.shape, opname)
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out = fwd(ad, bd)  # non-finite results raise NumericsError in _apply
    sa, sb = ad.shape, bd.shape

    def back(g):
        ga = _unbroadcast(back_a(g, ad, bd), sa) if a.requires_grad else None
        gb = _unbroadcast(back_b(g, ad, bd), sb) if b.requires_grad else None
        return ga, gb

    return _apply(opname, out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("add", a, b, lambda x, y: x + y,
                        lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("sub", a, b, lambda x, y: x - y,
                        lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("mul", a, b, lambda x, y: x * y,
                        lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("div", a, b, lambda x, y: x / y,
                        lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (no rank promotion for constants)."""
    cd = a.data.dtype.type(c)
    return _apply("scale", a.data * cd, (a,), lambda g: (g * cd,))


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _apply("matmul", ad @ bd, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)
    return _apply("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _apply("transpose", np.ascontiguousarray(a.data.T), (a,),
                  lambda g: (np.ascontiguousarray(g.T),))


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    rank = tensors[0].data.ndim
    if axis < -rank or axis >= rank:
        raise ShapeError(f"concat axis {axis} out of range for rank {rank}")
    axis = axis % rank
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise ShapeError(f"concat rank mismatch: {tensors[0].shape} vs {t.shape}")
        for d in range(rank):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError(f"concat non-axis extents differ: {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _apply("concat", out, tuple(tensors), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _apply("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _reduce(opname, a, axes, keepdims, fwd, back):
    nd = a.data.ndim
    if axes is None:
        ax = tuple(range(nd))
    elif isinstance(axes, int):
        ax = (axes % nd,)
    else:
        ax = tuple(x % nd for x in axes)
    out = fwd(a.data, ax, keepdims)
    return _apply(opname, out, (a,), lambda g: (back(g, a.data.shape, ax, keepdims),))


def _expand(g, shape, ax, keepdims):
    if not keepdims:
        for x in sorted(ax):
            g = np.expand_dims(g, x)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return _reduce("sum", a, axes, keepdims,
                   lambda d, ax, k: d.sum(axis=ax, keepdims=k),
                   lambda g, shape, ax, k: np.ascontiguousarray(_expand(g, shape, ax, k)))


def tmean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    def back(g, shape, ax, k):
        n = 1
        for x in ax:
            n *= shape[x]
        return np.ascontiguousarray(_expand(g, shape, ax, k)) / n

    return _reduce("mean", a, axes, keepdims,
                   lambda d, ax, k: d.mean(axis=ax, keepdims=k), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis of a 2-D tensor.

    Outputs are floored at the dtype's smallest positive normal so that a
    saturated row never underflows to an exact zero; an exact zero would kill
    the gradient of any downstream log-likelihood and make saturation
    unrecoverable in 32-bit training.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    s = np.maximum(s, np.finfo(s.dtype).tiny)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _apply("softmax_rows", s, (a,), back)


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over the channel axis of an (H, W, K) tensor."""
    h, w, k = a.shape
    return reshape(softmax_rows(reshape(a, (h * w, k))), (h, w, k))


# ---------------------------------------------------------------------------
# Convolution and the category-pooling / distribution ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kern: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of an (H, W, Cin) input with a (kh, kw, Cin, Cout) kernel."""
    if x.data.ndim != 3 or kern.data.ndim != 4:
        raise ShapeError(f"conv2d needs (H,W,Cin) x (kh,kw,Cin,Cout), got {x.shape} x {kern.shape}")
    kh, kw, cin, cout = kern.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got ({kh}, {kw})")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kern.shape}")
    if pad is None:
        pad = kh // 2
    h, w = x.shape[:2]
    xd, kd = x.data, kern.data
    out = kernels.conv2d_forward(xd, kd, stride, pad)

    def back(g):
        gx = kernels.conv2d_backward_input(g, kd, stride, pad, h, w) if x.requires_grad else None
        gk = kernels.conv2d_backward_kernel(xd, g, stride, pad, kh, kw) if kern.requires_grad else None
        return gx, gk

    return _apply("conv2d", out, (x, kern), back)


def masked_pool(f: Tensor, label_map: np.ndarray, k: int, mode: str = "both"):
    """Category-wise pooling of (H, W, C) features over an integer label map.

    Returns (features, counts): one row per category, holding the masked mean,
    the channelwise masked max, or their concatenation per ``mode``. Empty
    categories pool to zero rows. The label map is a constant; gradients flow
    to ``f`` through the mean spread and the max selections.
    """
    if mode not in ("both", "ave", "max"):
        raise ValueError(f"masked_pool mode must be both|ave|max, got {mode!r}")
    if f.data.ndim != 3 or label_map.shape != f.shape[:2]:
        raise ShapeError(f"masked_pool needs (H,W,C) features and (H,W) labels, "
                         f"got {f.shape} and {label_map.shape}")
    if label_map.min() < 0 or label_map.max() >= k:
        raise ShapeError(f"label map values out of range [0, {k})")
    c = f.shape[2]
    sums, counts, maxv, argi = kernels.masked_pool_forward(f.data, label_map, k)
    inv = np.zeros(k, f.data.dtype)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]
    ave = sums * inv[:, None]
    shape = f.data.shape
    zeros = np.zeros((k, c), f.data.dtype)

    if mode == "both":
        feats = np.concatenate([ave, maxv], axis=1)
    elif mode == "ave":
        feats = ave
    else:
        feats = maxv

    def back(g):
        # the kernel spreads the mean gradient evenly over each mask (1/count)
        if mode == "both":
            gave, gmax = g[:, :c], g[:, c:]
        elif mode == "ave":
            gave, gmax = g, zeros
        else:
            gave, gmax = zeros, g
        return (kernels.masked_pool_backward(gave, gmax, label_map, counts, argi, shape),)

    return _apply("masked_pool", feats, (f,), back), counts


def broadcast_nodes(w: Tensor, label_map: np.ndarray) -> Tensor:
    """Per-pixel lookup of a (K, C) row table through an (H, W) label map."""
    if w.data.ndim != 2:
        raise ShapeError(f"broadcast_nodes needs a (K,C) table, got {w.shape}")
    k = w.shape[0]
    out = kernels.gather_rows(w.data, label_map)

    def back(g):
        return (kernels.scatter_rows(g, label_map, k),)

    return _apply("broadcast_nodes", out, (w,), back)


def cross_entropy_mean(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of an (H, W, K) probability map at ``labels``."""
    h, w, k = probs.shape
    if labels.shape != (h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match prediction {probs.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label out of range [0, {k})")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    p = probs.data[ii, jj, labels]
    tiny = np.finfo(probs.data.dtype).tiny
    pc = np.maximum(p, tiny)
    out = np.asarray(-np.log(pc).mean(), dtype=probs.data.dtype)
    n = h * w

    def back(g):
        gp = np.zeros_like(probs.data)
        gp[ii, jj, labels] = np.where(p >= tiny, -g / (pc * n), 0.0)
        return (gp,)

    return _apply("cross_entropy", out, (probs,), back)


def argmax_channel(a: Tensor) -> np.ndarray:
    """Per-pixel argmax over channels of an (H, W, K) tensor. Not on the tape."""
    if a.data.ndim != 3:
        raise ShapeError(f"argmax_channel needs (H,W,K), got {a.shape}")
    return np.argmax(a.data, axis=2).astype(np.int64)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.0, buffers: dict[str, np.ndarray] | None = None):
    """p <- p - lr * v with v = momentum * v + g. Updates params in place.

    Only parameters present in ``grads`` are touched, so unreached branches
    stay bitwise identical. Returns the momentum buffers.
    """
    if buffers is None:
        buffers = {}
    for name, g in grads.items():
        t = params[name]
        if g.shape != t.data.shape:
            raise ShapeError(f"sgd_step: gradient shape {g.shape} does not match "
                             f"parameter {name} shape {t.data.shape}")
        if momentum != 0.0:
            buf = buffers.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            buffers[name] = buf
            upd = buf
        else:
            upd = g
        t.data = t.data - t.data.dtype.type(lr) * upd
    return buffers


class SGD:
    """Plain SGD with momentum over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        sgd_step(self.params, grads, self.lr if lr is None else lr,
                 self.momentum, self.buffers)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    """Zero-mean uniform init scaled by 1/sqrt(fan_in); always a trainable leaf."""
    s = 1.0 / np.sqrt(max(1, fan_in))
    data = rng.uniform(-s, s, size=shape).astype(_DTYPE)
    return Tensor(data, requires_grad=True)
