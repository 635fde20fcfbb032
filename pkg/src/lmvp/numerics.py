"""Small reverse-mode autodiff core on top of numpy.

Arrays are channels-last: images are ``(N, H, W, C)`` and convolution kernels
are ``(k, k, C_in, C_out)``.  Every op returns a :class:`Tensor`; when grad
mode is on and any input requires a gradient, the op records its parents and
a backward closure on the output node.  :func:`backprop` walks that tape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError", "NumericalError", "Tensor", "tensor", "parameter", "no_grad",
    "grad_enabled", "backprop", "add", "sub", "mul", "scale", "sum_all", "mean_all",
    "square", "log", "clamp", "concat", "reshape", "conv2d", "bias_add", "dense",
    "activation", "softmax_sites", "upsample2x", "global_avg_pool", "pad_replicate",
    "local_filter", "one_minus", "conv_gru_step", "AdamState", "adam_update",
]


class ContractError(ValueError):
    """Raised when an op receives arguments that violate its shape contract."""


class NumericalError(FloatingPointError):
    """Raised when a non-finite value shows up at an op boundary."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _check_finite(arr: np.ndarray, op: str) -> None:
    # sum propagates nan/inf; one reduction instead of an elementwise mask
    if not np.isfinite(arr.sum()):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite value produced by {op}")


def tensor(data, dtype=None, requires_grad=False, name=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    _check_finite(arr, "tensor")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _node(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- backprop

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor, wrt) -> dict | list:
    """Gradients of the scalar ``loss`` with respect to the leaves in ``wrt``.

    ``wrt`` is either a mapping ``name -> Tensor`` (a dict of gradients is
    returned) or a sequence of tensors (a list is returned).  Leaves that the
    loss does not depend on get exact zeros.  Nothing outside ``wrt`` is
    reported, so callers can update one parameter group while the tape spans
    several.
    """
    if loss.data.size != 1:
        raise ContractError(f"backprop: loss must be a scalar, got shape {loss.shape}")
    items = list(wrt.items()) if isinstance(wrt, dict) else list(enumerate(wrt))
    for key, p in items:
        if p.parents:
            raise ContractError(f"backprop: {key!r} is not a tape leaf")
    wanted = {id(p) for _, p in items}
    leaf_grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                if id(node) in wanted:
                    leaf_grads[id(node)] = g
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for key, p in items:
        g = leaf_grads.get(id(p))
        out[key] = np.zeros_like(p.data) if g is None else g
    if isinstance(wrt, dict):
        return out
    return [out[i] for i in range(len(items))]


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.full_like(a.data, g),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.full_like(a.data, g / n),), "mean")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ContractError(f"concat: {e}") from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(data, xs, backward, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------- layers

def pad_replicate(x: Tensor, p: int) -> Tensor:
    """Edge-replicate padding of the two spatial axes of an (N, H, W, C) tensor."""
    if p == 0:
        return x
    H, W = x.shape[1], x.shape[2]

    def backward(g):
        g = g.copy()
        g[:, p, :] += g[:, :p, :].sum(axis=1)
        g[:, p + H - 1, :] += g[:, p + H:, :].sum(axis=1)
        g[:, :, p] += g[:, :, :p].sum(axis=2)
        g[:, :, p + W - 1] += g[:, :, p + W:].sum(axis=2)
        return (g[:, p:p + H, p:p + W],)

    data = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")
    return _node(data, (x,), backward, "pad_replicate")


def _pad_zero(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


# below this many input channels the im2col route beats per-offset matmuls
_COLS_MAX_CIN = 8


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same-zero") -> Tensor:
    """2-D cross-correlation, (N,H,W,Cin) * (k,k,Cin,Cout) -> (N,H',W',Cout).

    ``padding`` is ``"same-zero"``, ``"same-replicate"`` or ``"valid"``.  Same
    padding needs an odd kernel and gives ``H' = ceil(H / stride)``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    N, H, W, C = x.shape
    kh, kw, wc, O = w.shape
    if kh != kw:
        raise ContractError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if wc != C:
        raise ContractError(f"conv2d: input channels {C} != kernel input channels {wc}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    k = kh
    if padding == "valid":
        p = 0
        if k > H or k > W:
            raise ContractError(f"conv2d: kernel {k} larger than input {H}x{W}")
        Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
        xp_t = x
    elif padding in ("same-zero", "same-replicate"):
        if k % 2 == 0:
            raise ContractError(f"conv2d: same padding needs an odd kernel, got k={k}")
        p = k // 2
        Ho, Wo = -(-H // stride), -(-W // stride)
        xp_t = pad_replicate(x, p) if padding == "same-replicate" else None
    else:
        raise ContractError(f"conv2d: unknown padding {padding!r}")

    xp = xp_t.data if xp_t is not None else _pad_zero(x.data, p)
    s = stride
    hs, ws = s * (Ho - 1) + 1, s * (Wo - 1) + 1

    if C <= _COLS_MAX_CIN:
        cols = np.empty((N, Ho, Wo, k, k, C), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + hs:s, j:j + ws:s, :]
        cols = cols.reshape(-1, k * k * C)
        out = (cols @ w.data.reshape(-1, O)).reshape(N, Ho, Wo, O)
    else:
        cols = None
        out = np.zeros((N, Ho, Wo, O), dtype=np.result_type(xp, w.data))
        for i in range(k):
            for j in range(k):
                out += xp[:, i:i + hs:s, j:j + ws:s, :] @ w.data[i, j]

    src = xp_t if xp_t is not None else x

    def backward(g):
        g2 = g.reshape(-1, O)
        gw = None
        if w.requires_grad:
            if cols is not None:
                gw = (cols.T @ g2).reshape(w.shape)
            else:
                gw = np.empty_like(w.data)
                for i in range(k):
                    for j in range(k):
                        sl = xp[:, i:i + hs:s, j:j + ws:s, :].reshape(-1, C)
                        gw[i, j] = sl.T @ g2
        gx = None
        if src.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if C >= O:
                # one wide matmul, then scatter the k*k slabs
                z = (g2 @ w.data.transpose(3, 0, 1, 2).reshape(O, -1)).reshape(N, Ho, Wo, k, k, C)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + hs:s, j:j + ws:s, :] += z[:, :, :, i, j]
            else:
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + hs:s, j:j + ws:s, :] += g @ w.data[i, j].T
            if xp_t is None and p:
                gxp = gxp[:, p:p + H, p:p + W, :]
            gx = gxp
        return gx, gw

    return _node(out, (src, w), backward, "conv2d")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Adds a per-channel bias along the last axis (the only broadcast allowed)."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ContractError(f"bias_add: bias shape {b.shape} does not match channels {x.shape[-1]}")
    axes = tuple(range(x.data.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "bias_add")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer: ``w @ x + b`` for x of shape (n,) or (N, n); w is (m, n)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ContractError(f"dense: incompatible shapes input {x.shape}, weights {w.shape}, bias {b.shape}")
    out = x.data @ w.data.T + b.data

    def backward(g):
        gx = g @ w.data
        if x.data.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _node(out, (x, w, b), backward, "dense")


def activation(x: Tensor, kind: str) -> Tensor:
    d = x.data
    if kind == "sigmoid":
        # tanh form is overflow-free for large |d|
        y = 0.5 * (1 + np.tanh(0.5 * d))
        return _node(y, (x,), lambda g: (g * y * (1 - y),), kind)
    if kind == "tanh":
        y = np.tanh(d)
        return _node(y, (x,), lambda g: (g * (1 - y * y),), kind)
    if kind == "relu":
        mask = d > 0
        return _node(np.maximum(d, 0), (x,), lambda g: (np.where(mask, g, 0),), kind)
    if kind == "leaky_relu":
        mask = d > 0
        return _node(np.where(mask, d, 0.2 * d), (x,), lambda g: (np.where(mask, g, 0.2 * g),), kind)
    raise ContractError(f"activation: unknown kind {kind!r}")


def softmax_sites(x: Tensor) -> Tensor:
    """Softmax over the last (filter-tap) axis at every spatial site."""
    if x.shape[-1] < 1:
        raise ContractError("softmax_sites: need at least one tap")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward, "softmax_sites")


def upsample2x(x: Tensor) -> Tensor:
    N, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(N, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return _node(out, (x,), backward, "upsample2x")


def global_avg_pool(x: Tensor) -> Tensor:
    N, H, W, C = x.shape
    n = H * W
    return _node(x.data.mean(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None, :] / n, x.shape).copy(),), "gap")


def local_filter(xp: Tensor, w: Tensor) -> Tensor:
    """Per-pixel filtering of an already padded image.

    ``xp`` is (N, H+K-1, W+K-1, C) and ``w`` is (N, H, W, K*K) with taps in
    row-major (row offset, column offset) order.
    """
    N, H, W, KK = w.shape
    K = int(round(KK ** 0.5))
    if K * K != KK:
        raise ContractError(f"local_filter: {KK} taps is not a square filter")
    if xp.shape[0] != N or xp.shape[1] != H + K - 1 or xp.shape[2] != W + K - 1:
        raise ContractError(f"local_filter: padded input {xp.shape} does not fit {K}x{K} filters over {H}x{W}")
    xd, wd = xp.data, w.data
    out = np.zeros((N, H, W, xp.shape[3]), dtype=np.result_type(xd, wd))
    for u in range(K):
        for v in range(K):
            t = u * K + v
            out += wd[..., t:t + 1] * xd[:, u:u + H, v:v + W, :]

    def backward(g):
        gx = np.zeros_like(xd) if xp.requires_grad else None
        gw = np.empty_like(wd) if w.requires_grad else None
        for u in range(K):
            for v in range(K):
                t = u * K + v
                if gw is not None:
                    gw[..., t] = (g * xd[:, u:u + H, v:v + W, :]).sum(axis=-1)
                if gx is not None:
                    gx[:, u:u + H, v:v + W, :] += g * wd[..., t:t + 1]
        return gx, gw

    return _node(out, (xp, w), backward, "local_filter")


def conv_gru_step(h: Tensor, x: Tensor, params: dict) -> Tensor:
    """One convolutional GRU update.

    ``params`` holds ``w_zr`` (k,k,Cx+Ch,2Ch), ``b_zr`` (2Ch,), ``w_h``
    (k,k,Cx+Ch,Ch) and ``b_h`` (Ch,).  The update gate ``z`` keeps the old
    state: ``h' = z*h + (1-z)*tanh(conv([x, r*h]))``.
    """
    Ch = h.shape[-1]
    if params["w_zr"].shape[-1] != 2 * Ch or params["w_h"].shape[-1] != Ch:
        raise ContractError(f"conv_gru_step: hidden channels {Ch} do not match gate kernels")
    if h.shape[:3] != x.shape[:3]:
        raise ContractError(f"conv_gru_step: hidden {h.shape} and input {x.shape} differ spatially")
    xh = concat([x, h], axis=-1)
    zr = activation(bias_add(conv2d(xh, params["w_zr"]), params["b_zr"]), "sigmoid")
    z, r = _split_channels(zr, Ch)
    cand = activation(bias_add(conv2d(concat([x, mul(r, h)], axis=-1), params["w_h"]), params["b_h"]), "tanh")
    one_minus_z = one_minus(z)
    return add(mul(z, h), mul(one_minus_z, cand))


def _split_channels(x: Tensor, n: int) -> tuple[Tensor, Tensor]:
    a_data, b_data = x.data[..., :n], x.data[..., n:]

    def bwd_a(g):
        full = np.zeros_like(x.data)
        full[..., :n] = g
        return (full,)

    def bwd_b(g):
        full = np.zeros_like(x.data)
        full[..., n:] = g
        return (full,)

    return _node(a_data, (x,), bwd_a, "slice"), _node(b_data, (x,), bwd_b, "slice")


def one_minus(x: Tensor) -> Tensor:
    return _node(1 - x.data, (x,), lambda g: (-g,), "one_minus")


# ---------------------------------------------------------------- Adam

class AdamState:
    """Moments and per-parameter step counts for one parameter group."""

    def __init__(self, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def copy(self) -> "AdamState":
        s = AdamState(self.lr, self.beta1, self.beta2, self.eps)
        s.m = {k: a.copy() for k, a in self.m.items()}
        s.v = {k: a.copy() for k, a in self.v.items()}
        s.t = dict(self.t)
        return s


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam step, in place, for every name in ``grads``."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_update: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"adam_update: moment for {name} has shape {m.shape}, parameter {p.shape}")
        t = state.t[name] + 1
        state.t[name] = t
        b1, b2 = state.beta1, state.beta2
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
