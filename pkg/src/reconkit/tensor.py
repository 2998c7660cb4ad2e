"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors hold float64 numpy arrays with up to 4 axes (batch, channel,
height, width).  Every differentiable operation records its parents and a
backward closure on a dynamic tape; ``backward`` walks the tape in reverse
topological order and accumulates gradients into leaves.  Gradients of
:class:`Parameter` leaves persist across backward calls until explicitly
zeroed, so repeated backward passes accumulate additively.

All convolutions are bias-free by construction: there is no bias term
anywhere in this module.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "abs_val",
    "square",
    "sum_all",
    "mean_all",
    "dot",
    "conv2d",
    "conv_transpose2d",
    "downsample2",
    "upsample2",
    "concat_channels",
    "slice_channels",
    "pad_reflect",
    "pad_zero",
    "crop2d",
    "apply_linear",
    "AdamOptimizer",
]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 4:
        raise ValueError(f"tensors support at most 4 axes, got {arr.ndim}")
    if arr.size == 0 or min(arr.shape) < 1:
        raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values rejected at tensor boundary")
    return arr


class Tensor:
    """A node of the dynamic computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        if parents:
            # Internal nodes trust their producers; only validate at the
            # boundary (leaf construction goes through _as_array).
            self.data = data
        else:
            self.data = _as_array(data)
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.data.reshape(-1)[0])

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf gradient.

        ``self`` must be scalar.  Each node is visited exactly once, in
        reverse topological order of the (acyclic) tape.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order: list[Tensor] = []
        state: dict[int, int] = {}  # id -> 0 visiting / 1 done
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            nid = id(node)
            if processed:
                state[nid] = 1
                order.append(node)
                continue
            if state.get(nid) is not None:
                # already visited or in progress; duplicate parent edges
                # (e.g. add(x, x)) land here.  Cycles cannot arise because
                # tensors are immutable once constructed.
                continue
            state[nid] = 0
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and state.get(id(p)) != 1:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    nid = id(p)
                    if nid in grads:
                        grads[nid] = grads[nid] + pg
                    else:
                        grads[nid] = pg
            else:
                # leaf: accumulate into persistent grad
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g


class Parameter(Tensor):
    """Named trainable leaf with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _reduce_scalar(grad: np.ndarray, shape) -> np.ndarray:
    """Collapse a broadcasted gradient back to a size-1 operand."""
    return np.array([grad.sum()]).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast supported)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    out = a.data + b.data

    def bw(g):
        ga = _reduce_scalar(g, a.shape) if a.shape != g.shape else g
        gb = _reduce_scalar(g, b.shape) if b.shape != g.shape else g
        return ga, gb

    return Tensor(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    out = a.data - b.data

    def bw(g):
        ga = _reduce_scalar(g, a.shape) if a.shape != g.shape else g
        gb = _reduce_scalar(g, b.shape) if b.shape != g.shape else g
        return ga, -gb

    return Tensor(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    out = a.data * b.data

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = _reduce_scalar(ga, a.shape)
        if gb.shape != b.shape:
            gb = _reduce_scalar(gb, b.shape)
        return ga, gb

    return Tensor(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        if ga.shape != a.shape:
            ga = _reduce_scalar(ga, a.shape)
        if gb.shape != b.shape:
            gb = _reduce_scalar(gb, b.shape)
        return ga, gb

    return Tensor(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bw(g):
        return (g * mask,)

    return Tensor(out, (x,), bw)


def abs_val(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    sign = np.sign(x.data)  # subgradient 0 at 0

    def bw(g):
        return (g * sign,)

    return Tensor(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def bw(g):
        return (2.0 * g * x.data,)

    return Tensor(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    out = np.array([x.data.sum()])

    def bw(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return Tensor(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.array([x.data.mean()])

    def bw(g):
        return (np.full_like(x.data, g.reshape(-1)[0] / n),)

    return Tensor(out, (x,), bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"dot shape mismatch {a.shape} vs {b.shape}")
    out = np.array([np.vdot(a.data, b.data)])

    def bw(g):
        s = g.reshape(-1)[0]
        return s * b.data, s * a.data

    return Tensor(out, (a, b), bw)


# ---------------------------------------------------------------------------
# spatial padding / cropping
# ---------------------------------------------------------------------------


def _reflect_index_map(h, w, p):
    idx = np.arange(h * w).reshape(h, w)
    return np.pad(idx, ((p, p), (p, p)), mode="reflect").ravel()


def _scatter_adjoint(g: np.ndarray, idx_flat: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of an index-gather pad: accumulate padded grads onto sources."""
    n, c = g.shape[0], g.shape[1]
    flat = g.reshape(n * c, -1)
    out = np.zeros((n * c, h * w))
    np.add.at(out, (np.arange(n * c)[:, None], idx_flat[None, :]), flat)
    return out.reshape(n, c, h, w)


def pad_reflect(x: Tensor, pad) -> Tensor:
    """Reflect-pad the two trailing spatial axes of a NCHW tensor.

    ``pad`` is either an int (same on all sides) or (top, bottom, left,
    right).
    """
    if isinstance(pad, int):
        pt = pb = pl = pr = pad
    else:
        pt, pb, pl, pr = pad
    n, c, h, w = x.shape
    idx = np.arange(h * w).reshape(h, w)
    idx_flat = np.pad(idx, ((pt, pb), (pl, pr)), mode="reflect").ravel()
    hp, wp = h + pt + pb, w + pl + pr
    out = x.data.reshape(n, c, -1)[:, :, idx_flat].reshape(n, c, hp, wp)

    def bw(g):
        return (_scatter_adjoint(g, idx_flat, h, w),)

    return Tensor(out, (x,), bw)


def pad_zero(x: Tensor, pad) -> Tensor:
    if isinstance(pad, int):
        pt = pb = pl = pr = pad
    else:
        pt, pb, pl, pr = pad
    out = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))

    def bw(g):
        h, w = x.shape[2], x.shape[3]
        return (g[:, :, pt:pt + h, pl:pl + w],)

    return Tensor(out, (x,), bw)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    out = x.data[:, :, top:top + height, left:left + width]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)

    return Tensor(out.copy(), (x,), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad_numpy(x: np.ndarray, padding: str, pad: int) -> np.ndarray:
    if padding == "valid" or pad == 0:
        return x
    if padding == "zero":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if padding == "reflect":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    raise ValueError(f"unknown padding mode {padding!r}")


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride: int):
    """Valid cross-correlation of a padded NCHW input with OIKK weights."""
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
    return out, win


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: str = "valid", pad: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation, differentiable in input and weight.

    ``padding`` is one of "valid", "zero", "reflect"; ``pad`` gives the
    border width for the two padded modes.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weight")
    n, c, h, w_ = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {ic}")
    xp = _pad_numpy(x.data, padding, pad)
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ValueError("kernel larger than (padded) input")
    out, win = _conv_forward(xp, weight.data, stride)
    hout, wout = out.shape[2], out.shape[3]

    def bw(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        wdat = weight.data
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("nohw,oc->nchw", g, wdat[:, :, i, j], optimize=True)
                gxp[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride] += contrib
        if padding == "valid" or pad == 0:
            gx = gxp
        elif padding == "zero":
            gx = gxp[:, :, pad:pad + h, pad:pad + w_]
        else:  # reflect
            idx_flat = _reflect_index_map(h, w_, pad)
            gx = _scatter_adjoint(gxp, idx_flat, h, w_)
        return gx, gw

    return Tensor(out, (x, weight), bw)


def conv_transpose2d(x: Tensor, weight: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution (exact adjoint of a valid strided conv2d).

    ``weight`` has shape (in_ch, out_ch, kh, kw); output spatial size is
    ``stride * (n - 1) + k``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv_transpose2d expects NCHW input and IOKK weight")
    n, c, h, w_ = x.shape
    ic, oc, kh, kw = weight.shape
    if ic != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {ic}")
    hout = stride * (h - 1) + kh
    wout = stride * (w_ - 1) + kw
    out = np.zeros((n, oc, hout, wout))
    wdat = weight.data
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * w_:stride] += np.einsum(
                "nchw,co->nohw", x.data, wdat[:, :, i, j], optimize=True
            )

    def bw(g):
        win = np.lib.stride_tricks.sliding_window_view(g, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        gx = np.einsum("nohwij,coij->nchw", win, wdat, optimize=True)
        gw = np.einsum("nohwij,nchw->coij", win, x.data, optimize=True)
        return gx, gw

    return Tensor(out, (x, weight), bw)


def downsample2(x: Tensor, weight: Tensor) -> Tensor:
    """Learned stride-2 downsampling; spatial extents must be even."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError("downsample2 requires even spatial extents (pad first)")
    if weight.shape[2] != 2 or weight.shape[3] != 2:
        raise ValueError("downsample2 uses a 2x2 kernel")
    return conv2d(x, weight, stride=2, padding="valid")


def upsample2(x: Tensor, weight: Tensor) -> Tensor:
    """Learned stride-2 transposed-conv upsampling (2x2 kernel)."""
    if weight.shape[2] != 2 or weight.shape[3] != 2:
        raise ValueError("upsample2 uses a 2x2 kernel")
    return conv_transpose2d(x, weight, stride=2)


def concat_channels(inputs) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0]
    for t in inputs[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ValueError("concat_channels: batch/spatial extents must match")
    out = np.concatenate([t.data for t in inputs], axis=1)
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return Tensor(out, tuple(inputs), bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop].copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return Tensor(out, (x,), bw)


def apply_linear(x: Tensor, forward_fn, adjoint_fn) -> Tensor:
    """Insert an arbitrary linear map (numpy -> numpy) into the graph.

    The backward pass applies ``adjoint_fn`` to the output gradient, which
    is exact whenever ``adjoint_fn`` is the true transpose of
    ``forward_fn``.
    """
    out = np.asarray(forward_fn(x.data), dtype=np.float64)

    def bw(g):
        return (np.asarray(adjoint_fn(g), dtype=np.float64),)

    return Tensor(out, (x,), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamOptimizer:
    """Adam with bias correction; per-parameter moments persist on the
    optimizer."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {p.name!r}")
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
