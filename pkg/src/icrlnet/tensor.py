"""numpy-backed dense tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation returns a new ``Tensor`` that
remembers its inputs and how to push gradients back into them.  Calling
``backward()`` on a scalar walks the recorded graph once, in reverse
topological order, accumulating into ``Tensor.grad``.  Gradient buffers
are never zeroed implicitly; training loops own ``zero_grad``.

Values are float32 by default.  Arrays that are already float64 are kept
as such, so the same graph-building code can run in a 64-bit shadow mode
for derivative checking.

Shape discipline: elementwise operations require exactly matching shapes.
The only implicit broadcast is scalar-with-tensor.  Everything richer has
to be spelled out with explicit reshape/stack/matmul, which keeps silent
shape bugs out.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)

_FLOAT_DTYPES = (np.float32, np.float64)


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


_DEBUG = False
_GRAD_ENABLED = True


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness checks (NaN/Inf raise ContractViolation)."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextmanager
def no_grad():
    """Context in which ops produce plain values without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus an optional gradient buffer and graph linkage.

    ``data`` is adopted, not copied, when it is already a float32/float64
    ndarray.  ``grad`` is lazily allocated on first accumulation and has
    the same shape and dtype as ``data``.  Object identity is the node id
    within a recorded computation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            self.data = data
        elif isinstance(data, (np.float32, np.float64)):
            # 0-d array arithmetic yields numpy scalars; keep their precision
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` of every reachable tensor with d(self)/d(tensor).

        ``self`` must be a scalar (size 1).  Gradients accumulate on top of
        whatever is already in the buffers.
        """
        if self.size != 1:
            raise ContractViolation(f"backward requires a scalar, got shape {self.shape}")
        order = topo_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (inputs first).

    Iterative so that deep chains do not hit the recursion limit; each node
    appears exactly once.
    """
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
        for parent in node._parents:
            stack.append((parent, False))
    return order


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; record graph linkage only when grads are wanted."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise ContractViolation("non-finite values produced by a forward op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _coerce_pair(a, b):
    """Validate an elementwise pair: equal shapes, or one side a scalar."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, (int, float, np.floating, np.integer)):
        return a, None, float(b)
    if not isinstance(b, Tensor):
        raise ContractViolation(f"expected Tensor or scalar, got {type(b).__name__}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b, None


def _fit(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to a size-1 operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; shapes must match exactly or one side is a scalar."""
    a, bt, const = _coerce_pair(a, b)
    if bt is None:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
        return _node(a.data + const, (a,), backward)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_fit(g, a.shape))
        if bt.requires_grad:
            bt._accumulate(_fit(g, bt.shape))
    return _node(a.data + bt.data, (a, bt), backward)


def sub(a, b) -> Tensor:
    a, bt, const = _coerce_pair(a, b)
    if bt is None:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
        return _node(a.data - const, (a,), backward)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_fit(g, a.shape))
        if bt.requires_grad:
            bt._accumulate(_fit(-g, bt.shape))
    return _node(a.data - bt.data, (a, bt), backward)


def neg(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x._accumulate(-g)
    return _node(-x.data, (x,), backward)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; same shapes or scalar-with-tensor."""
    a, bt, const = _coerce_pair(a, b)
    if bt is None:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g * const)
        return _node(a.data * const, (a,), backward)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_fit(g * bt.data, a.shape))
        if bt.requires_grad:
            bt._accumulate(_fit(g * a.data, bt.shape))
    return _node(a.data * bt.data, (a, bt), backward)


hadamard = mul


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: (p,q) x (q,r) -> (p,r); (p,q) x (q,) -> (p,); and the
    batched form (B,p,q) x (B,q,r) -> (B,p,r) with equal batch extents.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ContractViolation(f"matmul inner extents differ: {ad.shape} x {bd.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ bd.T)
            if b.requires_grad:
                b._accumulate(ad.T @ g)
        return _node(ad @ bd, (a, b), backward)

    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ContractViolation(f"matmul inner extents differ: {ad.shape} x {bd.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(np.outer(g, bd))
            if b.requires_grad:
                b._accumulate(ad.T @ g)
        return _node(ad @ bd, (a, b), backward)

    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ContractViolation(f"batched matmul shapes differ: {ad.shape} x {bd.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ bd.transpose(0, 2, 1))
            if b.requires_grad:
                b._accumulate(ad.transpose(0, 2, 1) @ g)
        return _node(ad @ bd, (a, b), backward)

    raise ContractViolation(f"unsupported matmul ranks: {ad.ndim} x {bd.ndim}")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias added per output column: (B,d) x (d,C) + (C,)."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ContractViolation(f"affine shapes: {xd.shape} x {wd.shape}")
    if b.data.shape != (wd.shape[1],):
        raise ContractViolation(f"affine bias shape {b.shape} vs {wd.shape[1]} outputs")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ wd.T)
        if w.requires_grad:
            w._accumulate(xd.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
    return _node(xd @ wd + b.data, (x, w, b), backward)


def transpose(x: Tensor) -> Tensor:
    """2-D transpose."""
    if x.ndim != 2:
        raise ContractViolation(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.T)
    return _node(x.data.T.copy(), (x,), backward)


def permute(x: Tensor, axes) -> Tensor:
    """Reorder axes, e.g. permute(t, (0, 2, 1)) swaps the trailing pair."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractViolation(f"axes {axes} is not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inverse))
    return _node(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))
    return _node(x.data.reshape(shape), (x,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new leading axis (axis 0 only)."""
    if axis != 0:
        raise ContractViolation("stack supports axis=0 only")
    ts = list(tensors)
    if not ts:
        raise ContractViolation("stack of zero tensors")
    base = ts[0].shape
    for t in ts:
        if t.shape != base:
            raise ContractViolation(f"stack shape mismatch: {t.shape} vs {base}")

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(g[i])
    return _node(np.stack([t.data for t in ts], axis=0), tuple(ts), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0; backward scatters into a zero buffer."""
    if not (0 <= start <= stop <= x.shape[0]):
        raise ContractViolation(f"slice [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[start:stop] = g
            x._accumulate(buf)
    return _node(x.data[start:stop], (x,), backward)


# -- reductions ---------------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    axis = int(axis)
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ContractViolation(f"axis {axis} out of range for rank {ndim}")
    return axis


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(np.asarray(g), x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))
    return _node(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    """Arithmetic mean along ``axis`` (or over everything when axis=None)."""
    axis = _normalize_axis(axis, x.ndim)
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(np.asarray(g) / n, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, x.shape))
    return _node(np.asarray(x.data.mean(axis=axis)), (x,), backward)


# -- nonlinearities -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))
    return _node(np.maximum(x.data, 0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function (no overflow for large |x|)."""
    xd = x.data
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))
    return _node(out, (x,), backward)


# -- convolution and pooling ----------------------------------------------------


def _gather_windows(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int) -> np.ndarray:
    """Collect sliding windows into (B, c, kh, kw, oh, ow)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + (oh - 1) * stride + 1:stride,
                                  j:j + (ow - 1) * stride + 1:stride]
    return cols


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (c_in,h,w) or batched (B,c_in,h,w); ``k`` is (c_out,c_in,kh,kw).
    Output spatial extents are (h + 2*pad - kh)/stride + 1 and must be
    integral.  ``bias``, when given, is a per-output-channel vector.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    kd = k.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ContractViolation(f"conv2d ranks: input {x.ndim}, kernel {k.ndim}")
    b, cin, h, w = xd.shape
    cout, kcin, kh, kw = kd.shape
    if cin != kcin:
        raise ContractViolation(f"conv2d channels: input {cin}, kernel {kcin}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ContractViolation(f"kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ContractViolation(
            f"non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _gather_windows(xp, kh, kw, oh, ow, stride)
    out = np.tensordot(kd, cols, axes=([1, 2, 3], [1, 2, 3]))  # (cout, B, oh, ow)
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ContractViolation(f"conv2d bias shape {bias.shape} vs {cout} channels")
        out = out + bias.data.reshape(1, cout, 1, 1)

    parents = (x, k) if bias is None else (x, k, bias)

    def backward(g):
        gb = g[None] if single else g
        if k.requires_grad:
            k._accumulate(np.tensordot(gb, cols, axes=([0, 2, 3], [0, 4, 5])))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.tensordot(gb, kd, axes=([1], [0]))  # (B, oh, ow, cin, kh, kw)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + (oh - 1) * stride + 1:stride,
                        j:j + (ow - 1) * stride + 1:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            x._accumulate(dx[0] if single else dx)

    return _node(out[0] if single else out, parents, backward)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window spatial max; trailing rows/columns that do not fill a
    window are dropped.  Backward routes the gradient to the first maximal
    element of each window (row-major order), so ties are deterministic.
    """
    if stride is None:
        stride = window
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ContractViolation(f"maxpool2d rank: {x.ndim}")
    b, c, h, w = xd.shape
    if window > h or window > w:
        raise ContractViolation(f"window {window} exceeds input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1

    wins = _gather_windows(xd, window, window, oh, ow, stride)
    flat = wins.reshape(b, c, window * window, oh, ow)
    idx = flat.argmax(axis=2)  # first occurrence wins on ties
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gb = g[None] if single else g
        if not x.requires_grad:
            return
        dx = np.zeros_like(xd)
        for t in range(window * window):
            i, j = divmod(t, window)
            contrib = gb * (idx == t)
            dx[:, :, i:i + (oh - 1) * stride + 1:stride,
               j:j + (ow - 1) * stride + 1:stride] += contrib
        x._accumulate(dx[0] if single else dx)

    return _node(out[0] if single else out, (x,), backward)


# -- normalization and loss -----------------------------------------------------


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps), along the last axis (1-D vector or matrix rows).

    A vector with norm <= eps comes back as x/eps (zeros for a zero input);
    the event is logged since downstream cosine similarities lose meaning.
    """
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        logger.warning("l2_normalize: input norm <= eps, returning eps-guarded value")
    denom = np.maximum(norm, eps)
    out = xd / denom

    def backward(g):
        if not x.requires_grad:
            return
        dot = (out * g).sum(axis=-1, keepdims=True)
        guarded = norm <= eps
        dx = np.where(guarded, g / denom, (g - out * dot) / denom)
        x._accumulate(dx)

    return _node(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over the batch.

    ``logits`` is (B,N); ``labels`` an int sequence of length B with values
    in [0,N).  Stabilized with the log-sum-exp shift.
    """
    if logits.ndim != 2:
        raise ContractViolation(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ContractViolation(f"labels shape {labels.shape} vs batch {b}")
    if labels.min() < 0 or labels.max() >= n:
        raise ContractViolation(f"label out of range [0,{n})")

    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    probs = np.exp(logp)

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[rows, labels] -= 1.0
            logits._accumulate(d * (np.asarray(g) / b))

    return _node(np.asarray(loss, dtype=ld.dtype), (logits,), backward)
